#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "jreg/cli.hpp"
#include "jreg/errors.hpp"

namespace jreg::cli {

namespace {

using nlohmann::json;

class Section {
 public:
  Section(const json& root, const char* name) : name_(name) {
    if (!root.contains(name)) return;
    node_ = &root.at(name);
    if (!node_->is_object()) throw ContractError(std::string("config: section \"") + name + "\" must be an object");
  }

  template <typename T>
  void get(const char* key, T& into) {
    seen_.insert(key);
    if (!node_ || !node_->contains(key)) return;
    try {
      into = node_->at(key).get<T>();
    } catch (const json::exception&) {
      throw ContractError(std::string("config: ") + name_ + "." + key + " has the wrong type");
    }
  }

  void finish() const {
    if (!node_) return;
    for (auto it = node_->begin(); it != node_->end(); ++it) {
      if (!seen_.count(it.key())) throw ContractError("config: unknown key " + name_ + "." + it.key());
    }
  }

 private:
  std::string name_;
  const json* node_ = nullptr;
  std::set<std::string> seen_;
};

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config is not valid JSON: ") + e.what(), e.byte);
  }
  if (!root.is_object()) throw ContractError("config: top level must be an object");
  for (auto it = root.begin(); it != root.end(); ++it) {
    static const std::set<std::string> known{"model", "train", "jreg", "data"};
    if (!known.count(it.key())) throw ContractError("config: unknown section \"" + it.key() + "\"");
  }

  ExperimentConfig cfg;
  Section m(root, "model");
  m.get("n_layers", cfg.model.n_layers);
  m.get("d_model", cfg.model.d_model);
  m.get("n_heads", cfg.model.n_heads);
  m.get("d_ffn", cfg.model.d_ffn);
  m.get("vocab_size", cfg.model.vocab_size);
  m.get("max_seq_len", cfg.model.max_seq_len);
  m.get("rope_base", cfg.model.rope_base);
  m.get("tie_embeddings", cfg.model.tie_embeddings);
  m.finish();

  Section t(root, "train");
  auto& tr = cfg.train;
  t.get("lr_max", tr.lr_max);
  t.get("warmup_steps", tr.warmup_steps);
  t.get("total_steps", tr.total_steps);
  t.get("lr_min_ratio", tr.lr_min_ratio);
  t.get("weight_decay", tr.weight_decay);
  t.get("beta1", tr.beta1);
  t.get("beta2", tr.beta2);
  t.get("adam_eps", tr.adam_eps);
  t.get("grad_clip", tr.grad_clip);
  t.get("batch_size", tr.batch_size);
  t.get("seq_len", tr.seq_len);
  t.get("seed", tr.seed);
  t.get("checkpoint_every", tr.checkpoint_every);
  t.get("eval_every", tr.eval_every);
  t.get("probe_windows", tr.probe_windows);
  t.get("eval_windows", tr.eval_windows);
  t.get("eval_batch_size", tr.eval_batch_size);
  t.finish();

  Section j(root, "jreg");
  std::string variant(to_string(cfg.jreg.variant));
  j.get("alpha", cfg.jreg.alpha);
  j.get("lambda", cfg.jreg.lambda);
  j.get("variant", variant);
  j.get("detach_input", cfg.jreg.detach_input);
  j.finish();
  cfg.jreg.variant = parse_variant(variant);

  Section d(root, "data");
  std::string corpus, synth(to_string(cfg.data.synth));
  d.get("corpus", corpus);
  d.get("synth", synth);
  d.get("synth_size", cfg.data.synth_size);
  d.get("synth_seed", cfg.data.synth_seed);
  d.get("validation_fraction", cfg.data.validation_fraction);
  d.finish();
  cfg.data.corpus = corpus;
  cfg.data.synth = parse_synth_kind(synth);

  cfg.model.validate();
  cfg.train.validate();
  cfg.jreg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& cfg) {
  const auto& m = cfg.model;
  const auto& t = cfg.train;
  json root = {
      {"model",
       {{"n_layers", m.n_layers},
        {"d_model", m.d_model},
        {"n_heads", m.n_heads},
        {"d_ffn", m.d_ffn},
        {"vocab_size", m.vocab_size},
        {"max_seq_len", m.max_seq_len},
        {"rope_base", m.rope_base},
        {"tie_embeddings", m.tie_embeddings}}},
      {"train",
       {{"lr_max", t.lr_max},
        {"warmup_steps", t.warmup_steps},
        {"total_steps", t.total_steps},
        {"lr_min_ratio", t.lr_min_ratio},
        {"weight_decay", t.weight_decay},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"adam_eps", t.adam_eps},
        {"grad_clip", t.grad_clip},
        {"batch_size", t.batch_size},
        {"seq_len", t.seq_len},
        {"seed", t.seed},
        {"checkpoint_every", t.checkpoint_every},
        {"eval_every", t.eval_every},
        {"probe_windows", t.probe_windows},
        {"eval_windows", t.eval_windows},
        {"eval_batch_size", t.eval_batch_size}}},
      {"jreg",
       {{"alpha", cfg.jreg.alpha},
        {"lambda", cfg.jreg.lambda},
        {"variant", std::string(to_string(cfg.jreg.variant))},
        {"detach_input", cfg.jreg.detach_input}}},
      {"data",
       {{"corpus", cfg.data.corpus.string()},
        {"synth", std::string(to_string(cfg.data.synth))},
        {"synth_size", cfg.data.synth_size},
        {"synth_seed", cfg.data.synth_seed},
        {"validation_fraction", cfg.data.validation_fraction}}},
  };
  return root.dump(2) + "\n";
}

TokenCorpus load_data(const DataConfig& data) {
  if (!data.corpus.empty()) return load_corpus(data.corpus, data.validation_fraction);
  return synth_corpus(data.synth, data.synth_size, data.synth_seed, data.validation_fraction);
}

}  // namespace jreg::cli
