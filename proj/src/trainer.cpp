#include "jreg/trainer.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>

#include "jreg/detail/rng.hpp"
#include "jreg/errors.hpp"

namespace jreg {

namespace {

constexpr std::uint64_t kStreamSalt = 11;
constexpr std::uint64_t kProbeSalt = 12;

const char* const kMetricHeader = "step,lr,ce,disp,total,zeta_L,zeta_L1,zeta_L2";

}  // namespace

void TrainConfig::validate() const {
  if (!(lr_max > 0.0)) throw ContractError("train: lr_max must be positive");
  if (warmup_steps > total_steps) throw ContractError("train: warmup_steps exceeds total_steps");
  if (!(lr_min_ratio > 0.0 && lr_min_ratio <= 1.0)) throw ContractError("train: lr_min_ratio must lie in (0, 1]");
  if (!(weight_decay >= 0.0)) throw ContractError("train: weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ContractError("train: betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ContractError("train: adam_eps must be positive");
  if (!(grad_clip > 0.0)) throw ContractError("train: grad_clip must be positive");
  if (batch_size == 0 || seq_len == 0) throw ContractError("train: batch_size and seq_len must be positive");
  if (probe_windows == 0 || eval_windows == 0 || eval_batch_size == 0) {
    throw ContractError("train: probe and evaluation sizes must be positive");
  }
}

double lr_at(std::uint64_t step, const TrainConfig& cfg) {
  if (step > cfg.total_steps) {
    throw RangeError("lr_at: step " + std::to_string(step) + " beyond total_steps " + std::to_string(cfg.total_steps));
  }
  if (step < cfg.warmup_steps) {
    return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  }
  const double lr_min = cfg.lr_max * cfg.lr_min_ratio;
  const std::uint64_t span = cfg.total_steps - cfg.warmup_steps;
  if (span == 0) return cfg.lr_max;
  const double p = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return lr_min + (cfg.lr_max - lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * p));
}

// ---- AdamW -----------------------------------------------------------------

AdamW::AdamW(std::vector<NamedParameter> params, const TrainConfig& cfg)
    : params_(std::move(params)), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay), clip_(cfg.grad_clip) {
  for (const auto& p : params_) {
    moments_.first.emplace_back(p.tensor.numel(), 0.0);
    moments_.second.emplace_back(p.tensor.numel(), 0.0);
  }
}

void AdamW::restore(AdamMoments moments) {
  if (moments.first.size() != params_.size() || moments.second.size() != params_.size()) {
    throw ContractError("optimizer state covers " + std::to_string(moments.first.size()) + " tensors, model has " +
                        std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (moments.first[i].size() != params_[i].tensor.numel() || moments.second[i].size() != params_[i].tensor.numel()) {
      throw ContractError("optimizer state for " + params_[i].name + " has the wrong size");
    }
  }
  moments_ = std::move(moments);
}

AdamW::Stats AdamW::step(double lr) {
  Stats stats;
  double sq = 0.0;
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) continue;
    const auto g = p.tensor.grad();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(g[j])) {
        throw NumericError("non-finite gradient in parameter " + p.name + " at element " + std::to_string(j));
      }
      sq += g[j] * g[j];
    }
  }
  stats.grad_norm = std::sqrt(sq);
  if (stats.grad_norm > clip_) stats.clip_scale = clip_ / stats.grad_norm;

  ++moments_.t;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(moments_.t));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(moments_.t));
  const double decay = 1.0 - lr * weight_decay_;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i].tensor;
    auto w = p.mutable_data();
    auto& m = moments_.first[i];
    auto& v = moments_.second[i];
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const double>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = has ? g[j] * stats.clip_scale : 0.0;
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      w[j] *= decay;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
  return stats;
}

// ---- evaluation ------------------------------------------------------------

double validation_loss(const Model& model, std::span<const TokenBatch> batches, std::optional<std::size_t> exit_layer) {
  if (batches.empty()) throw ContractError("validation_loss: no batches");
  NoGradGuard no_grad;
  double acc = 0.0;
  std::size_t count = 0;
  for (const auto& b : batches) {
    const Tensor logits = exit_layer ? model.forward_exit_at(b, *exit_layer) : model.forward(b).logits;
    const auto n = b.real_positions();
    acc += ce_loss(logits, b).item() * static_cast<double>(n);
    count += n;
  }
  return acc / static_cast<double>(count);
}

EvalRecord evaluate_probe(const Model& model, const TokenBatch& probe, const JregConfig& jreg) {
  NoGradGuard no_grad;
  const auto fwd = model.forward(probe);
  const auto loss = jreg_loss(fwd.logits, probe, fwd.trace, jreg);
  EvalRecord r;
  r.ce = loss.ce.item();
  r.disp = loss.disp.item();
  r.total = loss.total.item();
  r.profile = profile(fwd.trace);
  const std::size_t L = r.profile.n_layers();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  r.zeta_L = L >= 2 ? jump_rate(r.profile, L) : nan;
  r.zeta_L1 = L >= 3 ? jump_rate(r.profile, L - 1) : nan;
  r.zeta_L2 = L >= 4 ? jump_rate(r.profile, L - 2) : nan;
  return r;
}

TokenBatch make_probe(const TokenCorpus& corpus, const TrainConfig& cfg) {
  return probe_batch(corpus, cfg.seq_len, cfg.probe_windows, detail::mix_seed(cfg.seed, kProbeSalt));
}

std::vector<TokenBatch> make_validation(const TokenCorpus& corpus, const TrainConfig& cfg) {
  return validation_batches(corpus, cfg.seq_len, cfg.eval_windows, cfg.eval_batch_size);
}

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::uint64_t step) {
  char name[32];
  std::snprintf(name, sizeof(name), "ckpt_%08llu.bin", static_cast<unsigned long long>(step));
  return out_dir / name;
}

// ---- trainer ---------------------------------------------------------------

Trainer::Trainer(Model model, const TokenCorpus& corpus, TrainConfig cfg, JregConfig jreg, TrainSinks sinks)
    : Trainer(std::move(model), corpus, cfg, jreg, std::move(sinks), nullptr) {}

Trainer Trainer::resume(Checkpoint ckpt, const TokenCorpus& corpus, TrainConfig cfg, JregConfig jreg,
                        TrainSinks sinks) {
  if (!ckpt.optimizer) throw ContractError("cannot resume from a checkpoint without optimizer state");
  return Trainer(ckpt.model, corpus, cfg, jreg, std::move(sinks), &ckpt);
}

Trainer::Trainer(Model model, const TokenCorpus& corpus, TrainConfig cfg, JregConfig jreg, TrainSinks sinks,
                 const Checkpoint* from)
    : model_(model.clone()), corpus_(&corpus), cfg_(cfg), jreg_(jreg), sinks_(std::move(sinks)),
      opt_(model_.parameters(), cfg_),
      stream_(corpus.train(), cfg.seq_len, cfg.batch_size, detail::mix_seed(cfg.seed, kStreamSalt)),
      probe_(make_probe(corpus, cfg)) {
  cfg_.validate();
  jreg_.validate();
  corpus.validate();
  if (corpus.vocab_size > model_.config().vocab_size) {
    throw VocabularyError("corpus vocabulary " + std::to_string(corpus.vocab_size) + " exceeds model vocabulary " +
                          std::to_string(model_.config().vocab_size));
  }
  if (cfg_.seq_len > model_.config().max_seq_len) {
    throw LengthError("train seq_len " + std::to_string(cfg_.seq_len) + " exceeds max_seq_len " +
                      std::to_string(model_.config().max_seq_len));
  }
  for (auto& p : model_.parameters()) p.tensor.set_requires_grad(true);
  if (from) {
    opt_.restore(*from->optimizer);
    progress_ = from->progress;
    stream_.seek(progress_.stream_cursor);
  }
  if (!sinks_.out_dir.empty()) std::filesystem::create_directories(sinks_.out_dir);
  if (!from && cfg_.eval_every > 0) log_eval(evaluate());
}

EvalRecord Trainer::evaluate() const {
  auto r = evaluate_probe(model_, probe_, jreg_);
  r.step = progress_.step;
  r.lr = lr_at(std::min(progress_.step, cfg_.total_steps), cfg_);
  return r;
}

void Trainer::log_eval(const EvalRecord& r) {
  evals_.push_back(r);
  spdlog::info("step {:>6}  lr {:.3e}  probe ce {:.4f}  disp {:.4f}  zeta_L {:.2f}", r.step, r.lr, r.ce, r.disp,
               r.zeta_L);
  if (sinks_.on_eval) sinks_.on_eval(r);
  if (sinks_.out_dir.empty()) return;
  const auto path = sinks_.out_dir / "metrics.csv";
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path.string());
  if (fresh) out << kMetricHeader << '\n';
  out << r.step << ',' << format_number(r.lr) << ',' << format_number(r.ce) << ',' << format_number(r.disp) << ','
      << format_number(r.total) << ',' << format_number(r.zeta_L) << ',' << format_number(r.zeta_L1) << ','
      << format_number(r.zeta_L2) << '\n';
}

std::filesystem::path Trainer::save(const std::filesystem::path& path) const {
  save_checkpoint(path, model_, &opt_.moments(), progress_);
  return path;
}

StepLosses Trainer::step() {
  if (progress_.step >= cfg_.total_steps) throw ContractError("training already reached total_steps");
  const auto batch = stream_.next();
  if (batch.tokens.empty()) throw ContractError("batch stream yielded an empty batch");
  for (auto& p : model_.parameters()) p.tensor.zero_grad();

  StepLosses s;
  s.step = progress_.step + 1;
  s.lr = lr_at(s.step, cfg_);
  const auto abort = [&](const std::string& what) {
    return NumericError(what + " at step " + std::to_string(s.step) + "; last good checkpoint: " +
                        (last_checkpoint_ ? last_checkpoint_->string() : std::string("none")));
  };
  std::optional<JregLoss> loss;
  try {
    const auto fwd = model_.forward(batch);
    loss = jreg_loss(fwd.logits, batch, fwd.trace, jreg_);
  } catch (const NumericError& e) {
    throw abort(e.what());
  }
  s.ce = loss->ce.item();
  s.disp = loss->disp.item();
  s.total = loss->total.item();
  if (!std::isfinite(s.total)) throw abort("non-finite loss");
  loss->total.backward();
  const auto stats = opt_.step(s.lr);
  spdlog::debug("step {} ce {:.6f} disp {:.6f} grad_norm {:.4f}", s.step, s.ce, s.disp, stats.grad_norm);

  progress_.step = s.step;
  progress_.stream_cursor = stream_.cursor();
  progress_.last_ce = s.ce;
  progress_.last_disp = s.disp;
  progress_.last_total = s.total;
  history_.push_back(s);
  if (sinks_.on_step) sinks_.on_step(s);
  after_step();
  return s;
}

void Trainer::after_step() {
  const auto n = progress_.step;
  const bool last = n == cfg_.total_steps;
  if (cfg_.eval_every > 0 && (n % cfg_.eval_every == 0 || last)) log_eval(evaluate());
  if (!sinks_.out_dir.empty() && ((cfg_.checkpoint_every > 0 && n % cfg_.checkpoint_every == 0) || last)) {
    last_checkpoint_ = save(checkpoint_path(sinks_.out_dir, n));
    spdlog::info("checkpoint {}", last_checkpoint_->string());
  }
}

void Trainer::run_until(std::uint64_t step) {
  if (step > cfg_.total_steps) {
    throw RangeError("run_until: step " + std::to_string(step) + " beyond total_steps " +
                     std::to_string(cfg_.total_steps));
  }
  while (progress_.step < step) this->step();
}

TrainResult train(Model model, const TokenCorpus& corpus, const TrainConfig& cfg, const JregConfig& jreg,
                  TrainSinks sinks) {
  Trainer t(std::move(model), corpus, cfg, jreg, std::move(sinks));
  t.run();
  return {t.model().clone(), t.moments(), t.progress(), t.history(), t.evals()};
}

}  // namespace jreg
