#include "jreg/model.hpp"

#include <cmath>
#include <string>

#include "jreg/detail/binary_io.hpp"
#include "jreg/detail/rng.hpp"
#include "jreg/errors.hpp"

namespace jreg {

namespace {

constexpr double kInitStd = 0.02;
constexpr std::string_view kCheckpointMagic = "JREGCKPT";

Tensor random_matrix(detail::Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.truncated_normal(kInitStd);
  return Tensor::from({rows, cols}, std::move(v), true);
}

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_ffn < 1 || vocab_size < 1 || max_seq_len < 1) {
    throw ContractError("model config: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ContractError("model config: d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
                        std::to_string(n_heads));
  }
  if (head_dim() % 2 != 0) throw ContractError("model config: rotary embeddings need an even head dimension");
  if (!(rope_base > 0.0) || !std::isfinite(rope_base)) throw ContractError("model config: rope_base must be positive");
}

std::size_t TokenBatch::real_positions() const {
  if (mask.empty()) return positions();
  std::size_t n = 0;
  for (auto m : mask) n += (m != 0);
  return n;
}

void TokenBatch::validate() const {
  if (batch == 0 || seq_len == 0) throw ContractError("token batch is empty");
  if (tokens.size() != positions()) {
    throw ContractError("token batch holds " + std::to_string(tokens.size()) + " ids for " +
                        std::to_string(batch) + "x" + std::to_string(seq_len) + " positions");
  }
  if (!targets.empty() && targets.size() != positions()) throw ContractError("token batch targets size mismatch");
  if (!mask.empty() && mask.size() != positions()) throw ContractError("token batch mask size mismatch");
}

std::size_t HiddenTrace::positions() const {
  if (mask.empty()) return rows();
  std::size_t n = 0;
  for (auto m : mask) n += (m != 0);
  return n;
}

void HiddenTrace::validate() const {
  if (states.size() < 2) throw ContractError("hidden trace needs at least two states (h_0 and h_1)");
  const Shape& s0 = states.front().shape();
  if (s0.size() != 2) throw ContractError("hidden trace states must be [positions x D] matrices");
  for (const auto& s : states) {
    if (s.shape() != s0) {
      throw ContractError("hidden trace states disagree in shape: " + shape_str(s.shape()) + " vs " + shape_str(s0));
    }
  }
  if (!mask.empty() && mask.size() != s0[0]) throw ContractError("hidden trace mask size mismatch");
  if (positions() == 0) throw ContractError("hidden trace has no real positions");
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  detail::Rng rng(seed);
  const std::size_t d = config.d_model, f = config.d_ffn, v = config.vocab_size;
  m.token_embedding = random_matrix(rng, v, d);
  m.layers.reserve(config.n_layers);
  for (std::uint32_t l = 0; l < config.n_layers; ++l) {
    BlockParams w;
    w.attn_norm = ones(d);
    w.wq = random_matrix(rng, d, d);
    w.wk = random_matrix(rng, d, d);
    w.wv = random_matrix(rng, d, d);
    w.wo = random_matrix(rng, d, d);
    w.ffn_norm = ones(d);
    w.w_gate = random_matrix(rng, f, d);
    w.w_up = random_matrix(rng, f, d);
    w.w_down = random_matrix(rng, d, f);
    m.layers.push_back(std::move(w));
  }
  m.final_norm = ones(d);
  m.lm_head = config.tie_embeddings ? m.token_embedding : random_matrix(rng, v, d);
  return m;
}

std::vector<NamedParameter> Model::parameters() const {
  std::vector<NamedParameter> out;
  out.push_back({"token_embedding", token_embedding});
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& w = layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    out.push_back({p + "attn_norm", w.attn_norm});
    out.push_back({p + "wq", w.wq});
    out.push_back({p + "wk", w.wk});
    out.push_back({p + "wv", w.wv});
    out.push_back({p + "wo", w.wo});
    out.push_back({p + "ffn_norm", w.ffn_norm});
    out.push_back({p + "w_gate", w.w_gate});
    out.push_back({p + "w_up", w.w_up});
    out.push_back({p + "w_down", w.w_down});
  }
  out.push_back({"final_norm", final_norm});
  if (!config_.tie_embeddings) out.push_back({"lm_head", lm_head});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

Model Model::clone() const {
  Model m;
  m.config_ = config_;
  m.token_embedding = token_embedding.clone();
  for (const auto& w : layers) {
    m.layers.push_back({w.attn_norm.clone(), w.wq.clone(), w.wk.clone(), w.wv.clone(), w.wo.clone(),
                        w.ffn_norm.clone(), w.w_gate.clone(), w.w_up.clone(), w.w_down.clone()});
  }
  m.final_norm = final_norm.clone();
  m.lm_head = config_.tie_embeddings ? m.token_embedding : lm_head.clone();
  return m;
}

ForwardResult Model::forward(const TokenBatch& batch) const { return run(batch, config_.n_layers, true); }

Tensor Model::forward_exit_at(const TokenBatch& batch, std::size_t exit_layer) const {
  if (exit_layer > config_.n_layers) {
    throw RangeError("exit layer " + std::to_string(exit_layer) + " exceeds model depth " +
                     std::to_string(config_.n_layers));
  }
  return run(batch, exit_layer, false).logits;
}

ForwardResult Model::run(const TokenBatch& batch, std::size_t exit_layer, bool keep_trace) const {
  batch.validate();
  if (batch.seq_len > config_.max_seq_len) {
    throw LengthError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  const std::size_t b = batch.batch, t = batch.seq_len, d = config_.d_model, heads = config_.n_heads,
                    hd = config_.head_dim();

  auto split_heads = [&](const Tensor& x) {
    return reshape(permute(reshape(x, {b, t, heads, hd}), {0, 2, 1, 3}), {b * heads, t, hd});
  };
  auto merge_heads = [&](const Tensor& x) {
    return reshape(permute(reshape(x, {b, heads, t, hd}), {0, 2, 1, 3}), {b * t, d});
  };
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  ForwardResult result;
  Tensor h = embedding(token_embedding, batch.tokens);
  if (keep_trace) result.trace.states.push_back(h);

  for (std::size_t l = 0; l < exit_layer; ++l) {
    const BlockParams& w = layers[l];
    Tensor x = rmsnorm(h, w.attn_norm);
    Tensor q = rope(split_heads(linear(x, w.wq)), config_.rope_base);
    Tensor k = rope(split_heads(linear(x, w.wk)), config_.rope_base);
    Tensor v = split_heads(linear(x, w.wv));
    Tensor attn = causal_softmax(matmul_nt(q, k), scale);
    Tensor ctx = merge_heads(matmul(attn, v));
    h = h + linear(ctx, w.wo);

    Tensor y = rmsnorm(h, w.ffn_norm);
    h = h + linear(silu(linear(y, w.w_gate)) * linear(y, w.w_up), w.w_down);
    if (keep_trace) result.trace.states.push_back(h);
  }

  result.logits = reshape(linear(rmsnorm(h, final_norm), lm_head), {b, t, config_.vocab_size});
  result.trace.mask = batch.mask;
  return result;
}

// ---- checkpoints ---------------------------------------------------------
//
// Layout (all integers little-endian):
//   "JREGCKPT" u32 version
//   u32 n_layers d_model n_heads d_ffn vocab_size max_seq_len ; f64 rope_base ; u32 flags(bit0 = tied)
//   u64 step u64 stream_cursor f64 last_ce f64 last_disp f64 last_total
//   u32 n_tensors, then per tensor: u32 name_len, name, u32 rank, u64 dims[rank], f64 values[]
//   u32 has_optimizer; if 1: u64 t, then per tensor f64 first[numel], f64 second[numel]

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamMoments* optimizer,
                     const TrainProgress& progress) {
  const auto& c = model.config();
  const auto params = model.parameters();
  detail::ByteWriter w;
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  for (auto v : {c.n_layers, c.d_model, c.n_heads, c.d_ffn, c.vocab_size, c.max_seq_len}) w.u32(v);
  w.f64(c.rope_base);
  w.u32(c.tie_embeddings ? 1u : 0u);
  w.u64(progress.step);
  w.u64(progress.stream_cursor);
  w.f64(progress.last_ce);
  w.f64(progress.last_disp);
  w.f64(progress.last_total);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.string(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto dim : p.tensor.shape()) w.u64(dim);
    w.f64s(p.tensor.data());
  }
  w.u32(optimizer ? 1u : 0u);
  if (optimizer) {
    if (optimizer->first.size() != params.size() || optimizer->second.size() != params.size()) {
      throw ContractError("optimizer state does not match the model's parameter list");
    }
    w.u64(optimizer->t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (optimizer->first[i].size() != params[i].tensor.numel() ||
          optimizer->second[i].size() != params[i].tensor.numel()) {
        throw ContractError("optimizer moment size mismatch for " + params[i].name);
      }
      w.f64s(optimizer->first[i]);
      w.f64s(optimizer->second[i]);
    }
  }
  w.write_file(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = detail::ByteReader::from_file(path);
  r.expect_magic(kCheckpointMagic, "checkpoint");
  const auto version_at = r.offset();
  const auto version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  ModelConfig c;
  c.n_layers = r.u32("n_layers");
  c.d_model = r.u32("d_model");
  c.n_heads = r.u32("n_heads");
  c.d_ffn = r.u32("d_ffn");
  c.vocab_size = r.u32("vocab_size");
  c.max_seq_len = r.u32("max_seq_len");
  c.rope_base = r.f64("rope_base");
  c.tie_embeddings = (r.u32("flags") & 1u) != 0;
  const auto config_end = r.offset();
  try {
    c.validate();
  } catch (const ContractError& e) {
    throw FormatError(std::string("invalid model config in checkpoint: ") + e.what(), config_end);
  }

  Checkpoint ck;
  ck.progress.step = r.u64("step");
  ck.progress.stream_cursor = r.u64("stream_cursor");
  ck.progress.last_ce = r.f64("last_ce");
  ck.progress.last_disp = r.f64("last_disp");
  ck.progress.last_total = r.f64("last_total");

  // Shapes come from the config; the file must agree name-by-name.
  ck.model = Model::init(c, 0);
  auto params = ck.model.parameters();
  const auto count_at = r.offset();
  const auto n = r.u32("tensor count");
  if (n != params.size()) {
    throw FormatError("checkpoint holds " + std::to_string(n) + " tensors, config implies " +
                          std::to_string(params.size()),
                      count_at);
  }
  for (auto& p : params) {
    const auto name_at = r.offset();
    const auto name = r.string("tensor name");
    if (name != p.name) throw FormatError("expected tensor \"" + p.name + "\", found \"" + name + "\"", name_at);
    const auto shape_at = r.offset();
    const auto rank = r.u32("tensor rank");
    Shape s(rank);
    for (auto& dim : s) dim = r.u64("tensor dim");
    if (s != p.tensor.shape()) {
      throw FormatError("tensor " + name + " has shape " + shape_str(s) + ", expected " +
                            shape_str(p.tensor.shape()),
                        shape_at);
    }
    r.f64s(p.tensor.mutable_data(), name);
  }
  const auto has_opt = r.u32("optimizer flag");
  if (has_opt) {
    AdamMoments m;
    m.t = r.u64("optimizer step");
    for (const auto& p : params) {
      m.first.emplace_back(p.tensor.numel());
      m.second.emplace_back(p.tensor.numel());
      r.f64s(m.first.back(), "first moment of " + p.name);
      r.f64s(m.second.back(), "second moment of " + p.name);
    }
    ck.optimizer = std::move(m);
  }
  r.expect_end("checkpoint");
  return ck;
}

}  // namespace jreg
