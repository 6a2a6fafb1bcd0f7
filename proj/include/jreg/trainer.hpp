#pragma once

// AdamW training loop with warmup + cosine schedule, global-norm clipping,
// periodic probe evaluation and checkpointing.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "jreg/data_io.hpp"
#include "jreg/metrics.hpp"
#include "jreg/model.hpp"
#include "jreg/objective.hpp"

namespace jreg {

struct TrainConfig {
  double lr_max = 3e-4;
  std::uint64_t warmup_steps = 100;
  std::uint64_t total_steps = 2000;
  double lr_min_ratio = 0.1;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;
  std::size_t batch_size = 16;
  std::size_t seq_len = 128;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  std::uint64_t eval_every = 100;      // 0: no periodic evaluation
  std::size_t probe_windows = 16;
  std::size_t eval_windows = 64;
  std::size_t eval_batch_size = 16;

  void validate() const;
};

// Learning rate for update number `step` (1-based; step 0 gives 0).
double lr_at(std::uint64_t step, const TrainConfig& cfg);

class AdamW {
 public:
  AdamW(std::vector<NamedParameter> params, const TrainConfig& cfg);

  struct Stats {
    double grad_norm = 0.0;   // before clipping
    double clip_scale = 1.0;  // factor applied to every gradient
  };

  // Consumes the parameters' accumulated gradients; does not reset them.
  Stats step(double lr);

  const AdamMoments& moments() const { return moments_; }
  void restore(AdamMoments moments);

 private:
  std::vector<NamedParameter> params_;
  double beta1_, beta2_, eps_, weight_decay_, clip_;
  AdamMoments moments_;
};

struct StepLosses {
  std::uint64_t step = 0;  // update number that consumed this loss
  double lr = 0.0;
  double ce = 0.0;
  double disp = 0.0;
  double total = 0.0;
};

struct EvalRecord {
  std::uint64_t step = 0;
  double lr = 0.0;
  double ce = 0.0;
  double disp = 0.0;
  double total = 0.0;
  double zeta_L = 0.0;
  double zeta_L1 = 0.0;  // NaN when L − 1 < 2
  double zeta_L2 = 0.0;  // NaN when L − 2 < 2
  DisplacementProfile profile;
};

struct TrainSinks {
  // Metric log, checkpoints and the final probe profile land here; empty disables files.
  std::filesystem::path out_dir;
  std::function<void(const StepLosses&)> on_step;
  std::function<void(const EvalRecord&)> on_eval;
};

// Mean CE over all real positions of the batches. With exit_layer set the
// logits come from forward_exit_at, otherwise from forward.
double validation_loss(const Model& model, std::span<const TokenBatch> batches,
                       std::optional<std::size_t> exit_layer = std::nullopt);

EvalRecord evaluate_probe(const Model& model, const TokenBatch& probe, const JregConfig& jreg);

// The held-out probe and validation batches a training run with cfg uses.
TokenBatch make_probe(const TokenCorpus& corpus, const TrainConfig& cfg);
std::vector<TokenBatch> make_validation(const TokenCorpus& corpus, const TrainConfig& cfg);

std::filesystem::path checkpoint_path(const std::filesystem::path& out_dir, std::uint64_t step);

class Trainer {
 public:
  Trainer(Model model, const TokenCorpus& corpus, TrainConfig cfg, JregConfig jreg, TrainSinks sinks = {});
  // Continues from a checkpoint that carries optimizer state.
  static Trainer resume(Checkpoint ckpt, const TokenCorpus& corpus, TrainConfig cfg, JregConfig jreg,
                        TrainSinks sinks = {});

  StepLosses step();
  void run_until(std::uint64_t step);
  void run() { run_until(cfg_.total_steps); }

  EvalRecord evaluate() const;
  std::filesystem::path save(const std::filesystem::path& path) const;

  const Model& model() const { return model_; }
  std::uint64_t steps_done() const { return progress_.step; }
  const TrainProgress& progress() const { return progress_; }
  const AdamMoments& moments() const { return opt_.moments(); }
  const TokenBatch& probe() const { return probe_; }
  const std::vector<StepLosses>& history() const { return history_; }
  const std::vector<EvalRecord>& evals() const { return evals_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  Trainer(Model model, const TokenCorpus& corpus, TrainConfig cfg, JregConfig jreg, TrainSinks sinks,
          const Checkpoint* from);
  void log_eval(const EvalRecord& r);
  void after_step();

  Model model_;
  const TokenCorpus* corpus_;
  TrainConfig cfg_;
  JregConfig jreg_;
  TrainSinks sinks_;
  AdamW opt_;
  BatchStream stream_;
  TokenBatch probe_;
  TrainProgress progress_;
  std::vector<StepLosses> history_;
  std::vector<EvalRecord> evals_;
  std::optional<std::filesystem::path> last_checkpoint_;
};

struct TrainResult {
  Model model;
  AdamMoments moments;
  TrainProgress progress;
  std::vector<StepLosses> history;
  std::vector<EvalRecord> evals;
};

TrainResult train(Model model, const TokenCorpus& corpus, const TrainConfig& cfg, const JregConfig& jreg,
                  TrainSinks sinks = {});

}  // namespace jreg
