#pragma once

// Llama-style pre-norm decoder-only transformer.
//
//   h_0 = embed(tokens)
//   h_ℓ = h_{ℓ−1} + attn(rms(h_{ℓ−1})) ; h_ℓ += ffn(rms(h_ℓ))
//   logits = W · rms(h_L)
//
// forward() returns the raw residual stream h_0 … h_L (before the final
// norm) alongside the logits.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "jreg/tensor.hpp"

namespace jreg {

struct ModelConfig {
  std::uint32_t n_layers = 4;
  std::uint32_t d_model = 64;
  std::uint32_t n_heads = 4;
  std::uint32_t d_ffn = 256;
  std::uint32_t vocab_size = 256;
  std::uint32_t max_seq_len = 128;
  double rope_base = 10000.0;
  bool tie_embeddings = false;

  void validate() const;
  std::uint32_t head_dim() const { return d_model / n_heads; }
  bool operator==(const ModelConfig&) const = default;
};

// A batch of equal-length token sequences, row-major [batch × seq_len].
// targets may be empty when only a forward pass is needed. mask marks real
// (non-padding) positions; empty means all positions are real.
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
  std::vector<std::uint8_t> mask;

  std::size_t positions() const { return batch * seq_len; }
  std::size_t real_positions() const;
  void validate() const;
};

// Residual-stream states for every position of one forward pass.
// states[ℓ] has shape [rows × D]; mask (empty = all real) excludes padding.
struct HiddenTrace {
  std::vector<Tensor> states;
  std::vector<std::uint8_t> mask;

  std::size_t n_layers() const { return states.empty() ? 0 : states.size() - 1; }
  std::size_t rows() const { return states.empty() ? 0 : states.front().dim(0); }
  std::size_t width() const { return states.empty() ? 0 : states.front().dim(1); }
  std::size_t positions() const;
  bool is_real(std::size_t row) const { return mask.empty() || mask[row] != 0; }
  void validate() const;
};

struct ForwardResult {
  Tensor logits;  // [batch × seq_len × vocab]
  HiddenTrace trace;
};

struct BlockParams {
  Tensor attn_norm;  // [D]
  Tensor wq, wk, wv, wo;  // [D × D]
  Tensor ffn_norm;   // [D]
  Tensor w_gate;     // [F × D]
  Tensor w_up;       // [F × D]
  Tensor w_down;     // [D × F]
};

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

class Model {
 public:
  // Truncated-normal(0.02) matrices, unit norm gains; bitwise reproducible.
  static Model init(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  // Parameters in a fixed order. The handles alias the model's storage.
  std::vector<NamedParameter> parameters() const;
  std::size_t parameter_count() const;

  ForwardResult forward(const TokenBatch& batch) const;
  // Runs layers 1…exit_layer, then the final norm and the shared head.
  Tensor forward_exit_at(const TokenBatch& batch, std::size_t exit_layer) const;

  // Deep copy with fresh, graph-free parameter tensors.
  Model clone() const;

  Tensor token_embedding;  // [V × D]
  std::vector<BlockParams> layers;
  Tensor final_norm;  // [D]
  Tensor lm_head;     // [V × D]; aliases token_embedding when tied

 private:
  ModelConfig config_;
  ForwardResult run(const TokenBatch& batch, std::size_t exit_layer, bool keep_trace) const;
};

// ---- checkpoints ---------------------------------------------------------

struct AdamMoments {
  std::uint64_t t = 0;  // completed updates, for bias correction
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

struct TrainProgress {
  std::uint64_t step = 0;
  std::uint64_t stream_cursor = 0;  // windows consumed by the batch stream
  double last_ce = 0.0;
  double last_disp = 0.0;
  double last_total = 0.0;
};

struct Checkpoint {
  Model model;
  std::optional<AdamMoments> optimizer;
  TrainProgress progress;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model& model, const AdamMoments* optimizer,
                     const TrainProgress& progress);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace jreg
