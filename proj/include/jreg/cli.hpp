#pragma once

// The `jreg` command-line surface. Every command is also callable in-process.

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "jreg/data_io.hpp"
#include "jreg/model.hpp"
#include "jreg/objective.hpp"
#include "jreg/trainer.hpp"

namespace jreg::cli {

struct DataConfig {
  std::filesystem::path corpus;  // JREGTOKS file; empty selects the synthetic corpus
  SynthKind synth = SynthKind::markov_bytes;
  std::size_t synth_size = 1'200'000;
  std::uint64_t synth_seed = 0;
  double validation_fraction = kDefaultValidationFraction;
};

struct ExperimentConfig {
  ModelConfig model;
  TrainConfig train;
  JregConfig jreg;
  DataConfig data;
};

// JSON with optional "model", "train", "jreg" and "data" sections; missing
// keys keep their defaults, unknown keys are rejected.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);

TokenCorpus load_data(const DataConfig& data);

struct TrainOutcome {
  TrainResult result;
  std::vector<std::filesystem::path> checkpoints;
  DisplacementProfile final_profile;  // on the probe batch
  double final_validation_loss = 0.0;
};

// Files written to out_dir: config.json, metrics.csv, ckpt_*.bin,
// profile.csv (final probe profile) and summary.json.
TrainOutcome run_training(const ExperimentConfig& cfg, const std::filesystem::path& out_dir);

struct TrajectoryPoint {
  std::uint64_t step = 0;
  DisplacementProfile profile;
  double zeta_L = 0.0;
};

// Profiles of each checkpoint on the training probe, ordered by step.
std::vector<TrajectoryPoint> trajectory(std::span<const std::filesystem::path> checkpoints,
                                        const TokenCorpus& corpus, const TrainConfig& train);
// Checkpoint files in a directory, or a comma-separated list.
std::vector<std::filesystem::path> resolve_checkpoints(const std::string& dir_or_list);

// Validation loss with the forward pass stopped after layers 0…L.
std::vector<double> layer_skip_losses(const Model& model, const TokenCorpus& corpus, const TrainConfig& train);

// Accepts integers and the symbolic forms L, L-1, L-2, …
std::vector<std::size_t> parse_ells(const std::string& spec, std::size_t n_layers);

ReportTable weights_table(const LayerWeights& w);

// Runs `jreg <args…>` (args excludes the program name). Returns the exit code;
// failures print `error: <kind>: <message>` to err.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int main(int argc, char** argv);

}  // namespace jreg::cli
