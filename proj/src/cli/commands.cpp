#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <iostream>
#include <sstream>

#include "jreg/cli.hpp"
#include "jreg/errors.hpp"
#include "jreg/logging.hpp"

namespace jreg::cli {

// ---- in-process operations -------------------------------------------------

TrainOutcome run_training(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.model.validate();
  const auto corpus = load_data(cfg.data);
  std::filesystem::create_directories(out_dir);
  {
    std::ofstream f(out_dir / "config.json");
    if (!f) throw IoError("cannot write " + (out_dir / "config.json").string());
    f << dump_config(cfg);
  }
  spdlog::info("training {} steps: L={} D={} batch={} seq={} variant={} alpha={} lambda={}", cfg.train.total_steps,
               cfg.model.n_layers, cfg.model.d_model, cfg.train.batch_size, cfg.train.seq_len,
               to_string(cfg.jreg.variant), cfg.jreg.alpha, cfg.jreg.lambda);

  TrainSinks sinks;
  sinks.out_dir = out_dir;
  Trainer trainer(Model::init(cfg.model, cfg.train.seed), corpus, cfg.train, cfg.jreg, sinks);
  trainer.run();

  TrainOutcome o;
  o.result = {trainer.model().clone(), trainer.moments(), trainer.progress(), trainer.history(), trainer.evals()};
  const EvalRecord last = trainer.evals().empty() || trainer.evals().back().step != trainer.steps_done()
                              ? trainer.evaluate()
                              : trainer.evals().back();
  o.final_profile = last.profile;
  const auto val = make_validation(corpus, cfg.train);
  o.final_validation_loss = validation_loss(trainer.model(), val);
  o.checkpoints = resolve_checkpoints(out_dir.string());
  if (o.checkpoints.empty()) {
    o.checkpoints.push_back(trainer.save(checkpoint_path(out_dir, trainer.steps_done())));
  }

  write_report(profile_table(o.final_profile), out_dir / "profile.csv");
  nlohmann::json summary = {
      {"steps", trainer.steps_done()},
      {"final_validation_loss", o.final_validation_loss},
      {"probe_ce", last.ce},
      {"probe_disp", last.disp},
      {"zeta_L", last.zeta_L},
      {"final_checkpoint", o.checkpoints.back().string()},
  };
  std::ofstream(out_dir / "summary.json") << summary.dump(2) << "\n";
  spdlog::info("final validation loss {:.6f}, probe zeta_L {:.2f}", o.final_validation_loss, last.zeta_L);
  return o;
}

std::vector<std::filesystem::path> resolve_checkpoints(const std::string& dir_or_list) {
  std::vector<std::filesystem::path> out;
  if (std::filesystem::is_directory(dir_or_list)) {
    for (const auto& e : std::filesystem::directory_iterator(dir_or_list)) {
      const auto name = e.path().filename().string();
      if (e.is_regular_file() && name.starts_with("ckpt_") && e.path().extension() == ".bin") out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
  std::stringstream ss(dir_or_list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.emplace_back(item);
  }
  if (out.empty()) throw ContractError("no checkpoints given");
  return out;
}

std::vector<TrajectoryPoint> trajectory(std::span<const std::filesystem::path> checkpoints, const TokenCorpus& corpus,
                                        const TrainConfig& train) {
  const auto probe = make_probe(corpus, train);
  std::vector<TrajectoryPoint> out;
  for (const auto& path : checkpoints) {
    const auto ckpt = load_checkpoint(path);
    NoGradGuard no_grad;
    TrajectoryPoint p;
    p.step = ckpt.progress.step;
    p.profile = profile(ckpt.model.forward(probe).trace);
    p.zeta_L = jump_rate(p.profile, p.profile.n_layers());
    out.push_back(std::move(p));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
  return out;
}

std::vector<double> layer_skip_losses(const Model& model, const TokenCorpus& corpus, const TrainConfig& train) {
  const auto val = make_validation(corpus, train);
  std::vector<double> out;
  for (std::size_t l = 0; l <= model.config().n_layers; ++l) out.push_back(validation_loss(model, val, l));
  return out;
}

std::vector<std::size_t> parse_ells(const std::string& spec, std::size_t n_layers) {
  std::vector<std::size_t> out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
    if (item.empty()) continue;
    long long value = 0;
    if (item[0] == 'L') {
      long long off = 0;
      if (item.size() > 1) {
        if (item[1] != '-') throw ContractError("cannot parse layer index \"" + item + "\"");
        const auto r = std::from_chars(item.data() + 2, item.data() + item.size(), off);
        if (r.ec != std::errc() || r.ptr != item.data() + item.size()) {
          throw ContractError("cannot parse layer index \"" + item + "\"");
        }
      }
      value = static_cast<long long>(n_layers) - off;
    } else {
      const auto r = std::from_chars(item.data(), item.data() + item.size(), value);
      if (r.ec != std::errc() || r.ptr != item.data() + item.size()) {
        throw ContractError("cannot parse layer index \"" + item + "\"");
      }
    }
    if (value < 2 || value > static_cast<long long>(n_layers)) {
      throw RangeError("jump rate index " + item + " = " + std::to_string(value) + " outside [2, " +
                       std::to_string(n_layers) + "]");
    }
    out.push_back(static_cast<std::size_t>(value));
  }
  if (out.empty()) throw ContractError("no layer indices given");
  return out;
}

ReportTable weights_table(const LayerWeights& w) {
  ReportTable t{{{"layer", true}, {"w", false}}, {}};
  for (std::size_t l = 1; l <= w.w.size(); ++l) t.rows.push_back({static_cast<double>(l), w.w[l - 1]});
  return t;
}

// ---- command line ----------------------------------------------------------

namespace {

struct Context {
  std::ostream& out;
  std::ostream& err;
};

// Config for commands that evaluate a checkpoint: --config if given, else the
// config.json written next to the checkpoint by `train`, else defaults.
ExperimentConfig eval_config(const std::string& config_path, const std::filesystem::path& checkpoint,
                             const std::string& data_path) {
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    cfg = load_config(config_path);
  } else if (!checkpoint.empty() && std::filesystem::exists(checkpoint.parent_path() / "config.json")) {
    cfg = load_config(checkpoint.parent_path() / "config.json");
  }
  if (!data_path.empty()) cfg.data.corpus = data_path;
  return cfg;
}

void print_table(std::ostream& out, const ReportTable& t) {
  for (std::size_t c = 0; c < t.columns.size(); ++c) out << (c ? "  " : "") << fmt::format("{:>10}", t.columns[c].name);
  out << '\n';
  for (const auto& row : t.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out << (c ? "  " : "");
      if (t.columns[c].integer) {
        out << fmt::format("{:>10}", static_cast<long long>(row[c]));
      } else {
        out << fmt::format("{:>10.6f}", row[c]);
      }
    }
    out << '\n';
  }
}

void emit(const Context& ctx, const ReportTable& t, const std::string& out_path, const std::string& format) {
  if (out_path.empty()) {
    ctx.out << render_report(t, format.empty() ? ReportFormat::csv : parse_report_format(format));
    return;
  }
  if (format.empty()) {
    write_report(t, out_path);
  } else {
    write_report(t, out_path, parse_report_format(format));
  }
}

void add_format(CLI::App* cmd, std::string& format) {
  cmd->add_option("--format", format, "Report format csv|json (default: from the --out extension)")
      ->check(CLI::IsMember({"csv", "json"}));
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  Context ctx{out, err};
  CLI::App app{"Hidden-state displacement, jump rate and jump-suppressing regularization for small transformers",
               "jreg"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // train
  std::string t_config, t_variant, t_out_dir, t_data;
  double t_alpha = 0, t_lambda = 0;
  std::uint64_t t_seed = 0, t_steps = 0, t_warmup = 0, t_ckpt = 0, t_eval = 0;
  std::size_t t_batch = 0;
  auto* train = app.add_subcommand("train", "Train a model (baseline or JREG)");
  train->add_option("--config", t_config, "JSON experiment config (flags override it)");
  auto* o_alpha = train->add_option("--alpha", t_alpha, "Layer-weight temperature (default 1)");
  auto* o_lambda = train->add_option("--lambda", t_lambda, "Displacement loss weight (default 1)");
  train->add_option("--variant", t_variant, "weighted | final_only | off (default weighted)")
      ->check(CLI::IsMember({"weighted", "final_only", "off"}));
  auto* o_seed = train->add_option("--seed", t_seed, "Init / batch order seed (default 0)");
  train->add_option("--out-dir", t_out_dir, "Output directory")->required();
  auto* o_steps = train->add_option("--steps", t_steps, "Total update steps (default 2000)");
  auto* o_warmup = train->add_option("--warmup", t_warmup, "Warmup steps (default 100)");
  auto* o_ckpt = train->add_option("--checkpoint-every", t_ckpt, "Checkpoint interval (default 0: final only)");
  auto* o_eval = train->add_option("--eval-every", t_eval, "Probe evaluation interval (default 100)");
  auto* o_batch = train->add_option("--batch-size", t_batch, "Sequences per batch (default 16)");
  train->add_option("--data", t_data, "JREGTOKS corpus (default: synthetic corpus from the config)");

  // measure
  std::string m_ckpt, m_trace, m_data, m_config, m_out, m_positions = "all", m_format;
  auto* measure = app.add_subcommand("measure", "Displacement profile of a checkpoint or an imported trace");
  auto* o_mckpt = measure->add_option("--checkpoint", m_ckpt, "Checkpoint file");
  auto* o_mtrace = measure->add_option("--trace", m_trace, "JREGTRAC trace file (no model is loaded)");
  o_mckpt->excludes(o_mtrace);
  measure->add_option("--data", m_data, "JREGTOKS corpus providing the probe");
  measure->add_option("--config", m_config, "Experiment config (default: config.json beside the checkpoint)");
  measure->add_option("--positions", m_positions, "all | last")->check(CLI::IsMember({"all", "last"}));
  measure->add_option("--out", m_out, "Report path (stdout if omitted)");
  add_format(measure, m_format);

  // jump
  std::string j_profile, j_ells = "L,L-1,L-2", j_out, j_format;
  auto* jump = app.add_subcommand("jump", "Jump rates from a displacement profile");
  jump->add_option("--profile", j_profile, "layer,psi report")->required();
  jump->add_option("--ells", j_ells, "Comma-separated indices; L, L-1, … accepted (default L,L-1,L-2)");
  jump->add_option("--out", j_out, "Report path");
  add_format(jump, j_format);

  // trajectory
  std::string tr_ckpts, tr_data, tr_config, tr_out, tr_zeta_out, tr_format;
  auto* traj = app.add_subcommand("trajectory", "Profile and jump rate across checkpoints");
  traj->add_option("--checkpoints", tr_ckpts, "Directory of ckpt_*.bin or comma-separated files")->required();
  traj->add_option("--data", tr_data, "JREGTOKS corpus providing the probe");
  traj->add_option("--config", tr_config, "Experiment config (default: config.json beside the checkpoints)");
  traj->add_option("--out", tr_out, "step,layer,psi report")->required();
  traj->add_option("--zeta-out", tr_zeta_out, "step,zeta_L report (default: <out stem>_zeta<ext>)");
  add_format(traj, tr_format);

  // layer-skip
  std::string ls_ckpt, ls_data, ls_config, ls_out, ls_format;
  auto* skip = app.add_subcommand("layer-skip", "Validation loss when the forward pass exits at each layer");
  skip->add_option("--checkpoint", ls_ckpt, "Checkpoint file")->required();
  skip->add_option("--data", ls_data, "JREGTOKS corpus providing validation data");
  skip->add_option("--config", ls_config, "Experiment config (default: config.json beside the checkpoint)");
  skip->add_option("--out", ls_out, "exit_layer,val_loss report");
  add_format(skip, ls_format);

  // compare
  std::string c_a, c_b, c_out, c_format;
  auto* compare = app.add_subcommand("compare", "Per-layer displacement difference a − b");
  compare->add_option("--profile-a", c_a, "Profile of the regularized model")->required();
  compare->add_option("--profile-b", c_b, "Profile of the baseline model")->required();
  compare->add_option("--out", c_out, "layer,psi_a,psi_b,delta report");
  add_format(compare, c_format);

  // weights
  double w_alpha = 1.0;
  std::size_t w_layers = 0;
  std::string w_out, w_format;
  auto* weights = app.add_subcommand("weights", "Layer weights softmax(alpha · (1…L))");
  weights->add_option("--alpha", w_alpha, "Temperature")->required();
  weights->add_option("--layers", w_layers, "Number of layers")->required();
  weights->add_option("--out", w_out, "layer,w report");
  add_format(weights, w_format);

  // synth
  std::string s_kind = "markov_bytes", s_out;
  std::size_t s_size = 1'200'000;
  std::uint64_t s_seed = 0;
  auto* synth = app.add_subcommand("synth", "Write a synthetic JREGTOKS corpus");
  synth->add_option("--kind", s_kind, "markov_bytes | repeated_patterns")
      ->check(CLI::IsMember({"markov_bytes", "repeated_patterns"}));
  synth->add_option("--size", s_size, "Tokens (default 1200000)");
  synth->add_option("--seed", s_seed, "Seed (default 0)");
  synth->add_option("--out", s_out, "Output file")->required();

  // export-trace
  std::string e_ckpt, e_data, e_config, e_out;
  auto* exporter = app.add_subcommand("export-trace", "Write the probe trace of a checkpoint as JREGTRAC");
  exporter->add_option("--checkpoint", e_ckpt, "Checkpoint file")->required();
  exporter->add_option("--data", e_data, "JREGTOKS corpus providing the probe");
  exporter->add_option("--config", e_config, "Experiment config (default: config.json beside the checkpoint)");
  exporter->add_option("--out", e_out, "Output file")->required();

  // config
  std::string cf_config;
  auto* config = app.add_subcommand("config", "Print the resolved experiment config as JSON");
  config->add_option("--config", cf_config, "Config to resolve against the defaults");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << e.what() << "\n";
    return 64;
  }

  try {
    init_logging();

    if (train->parsed()) {
      ExperimentConfig cfg = t_config.empty() ? ExperimentConfig{} : load_config(t_config);
      if (o_alpha->count()) cfg.jreg.alpha = t_alpha;
      if (o_lambda->count()) cfg.jreg.lambda = t_lambda;
      if (!t_variant.empty()) cfg.jreg.variant = parse_variant(t_variant);
      if (o_seed->count()) cfg.train.seed = t_seed;
      if (o_steps->count()) cfg.train.total_steps = t_steps;
      if (o_warmup->count()) cfg.train.warmup_steps = t_warmup;
      if (o_ckpt->count()) cfg.train.checkpoint_every = t_ckpt;
      if (o_eval->count()) cfg.train.eval_every = t_eval;
      if (o_batch->count()) cfg.train.batch_size = t_batch;
      if (!t_data.empty()) cfg.data.corpus = t_data;
      cfg.train.validate();
      cfg.jreg.validate();
      const auto o = run_training(cfg, t_out_dir);
      out << fmt::format("steps {}  final validation loss {:.6f}  zeta_L {:.2f}\n", o.result.progress.step,
                         o.final_validation_loss, jump_rate(o.final_profile, o.final_profile.n_layers()));
      out << "checkpoint " << o.checkpoints.back().string() << "\n";
      return 0;
    }

    if (measure->parsed()) {
      if (m_ckpt.empty() && m_trace.empty()) throw ContractError("measure needs --checkpoint or --trace");
      DisplacementProfile p;
      if (!m_trace.empty()) {
        if (m_positions != "all") throw ContractError("--positions last needs --checkpoint (traces carry no batch layout)");
        p = profile(read_trace(m_trace));
      } else {
        const auto cfg = eval_config(m_config, m_ckpt, m_data);
        const auto ckpt = load_checkpoint(m_ckpt);
        const auto corpus = load_data(cfg.data);
        const auto probe = make_probe(corpus, cfg.train);
        NoGradGuard no_grad;
        const auto trace = ckpt.model.forward(probe).trace;
        p = m_positions == "last" ? profile(trace, last_position_filter(probe)) : profile(trace);
      }
      emit(ctx, profile_table(p), m_out, m_format);
      if (!m_out.empty()) {
        for (std::size_t l = 1; l <= p.n_layers(); ++l) out << fmt::format("psi_{} {:.4f}\n", l, p.psi(l));
        if (p.n_layers() >= 2) out << fmt::format("zeta_L {:.2f}\n", jump_rate(p, p.n_layers()));
      }
      return 0;
    }

    if (jump->parsed()) {
      const auto p = read_profile(j_profile);
      const auto ells = parse_ells(j_ells, p.n_layers());
      const auto report = jump_report(p, ells);
      if (!j_out.empty() || !j_format.empty()) emit(ctx, jump_table(report), j_out, j_format);
      if (!j_out.empty() || j_format.empty()) {
        for (const auto& [ell, z] : report.zeta) out << fmt::format("zeta_{} {:.2f}\n", ell, z);
      }
      return 0;
    }

    if (traj->parsed()) {
      const auto ckpts = resolve_checkpoints(tr_ckpts);
      if (ckpts.empty()) throw ContractError("no checkpoints found in " + tr_ckpts);
      const auto cfg = eval_config(tr_config, ckpts.front(), tr_data);
      const auto corpus = load_data(cfg.data);
      const auto points = trajectory(ckpts, corpus, cfg.train);
      ReportTable longform{{{"step", true}, {"layer", true}, {"psi", false}}, {}};
      ReportTable zeta{{{"step", true}, {"zeta_L", false}}, {}};
      for (const auto& pt : points) {
        for (std::size_t l = 1; l <= pt.profile.n_layers(); ++l) {
          longform.rows.push_back({static_cast<double>(pt.step), static_cast<double>(l), pt.profile.psi(l)});
        }
        zeta.rows.push_back({static_cast<double>(pt.step), pt.zeta_L});
        out << fmt::format("step {:>8}  zeta_L {:.2f}\n", pt.step, pt.zeta_L);
      }
      std::filesystem::path zpath = tr_zeta_out;
      if (zpath.empty()) {
        const std::filesystem::path o(tr_out);
        zpath = o.parent_path() / (o.stem().string() + "_zeta" + o.extension().string());
      }
      emit(ctx, longform, tr_out, tr_format);
      emit(ctx, zeta, zpath.string(), tr_format);
      return 0;
    }

    if (skip->parsed()) {
      const auto cfg = eval_config(ls_config, ls_ckpt, ls_data);
      const auto ckpt = load_checkpoint(ls_ckpt);
      const auto corpus = load_data(cfg.data);
      const auto losses = layer_skip_losses(ckpt.model, corpus, cfg.train);
      ReportTable t{{{"exit_layer", true}, {"val_loss", false}}, {}};
      for (std::size_t l = 0; l < losses.size(); ++l) t.rows.push_back({static_cast<double>(l), losses[l]});
      emit(ctx, t, ls_out, ls_format);
      if (!ls_out.empty()) print_table(out, t);
      return 0;
    }

    if (compare->parsed()) {
      const auto a = read_profile(c_a);
      const auto b = read_profile(c_b);
      const auto t = delta_table(a, b);
      emit(ctx, t, c_out, c_format);
      const auto delta = redundancy_delta(a, b);
      const auto positive = std::count_if(delta.begin(), delta.end(), [](double d) { return d > 0.0; });
      out << fmt::format("layers with delta > 0: {} of {}\n", positive, delta.size());
      return 0;
    }

    if (weights->parsed()) {
      const auto t = weights_table(layer_weights(w_alpha, w_layers));
      if (!w_out.empty() || !w_format.empty()) {
        emit(ctx, t, w_out, w_format);
      }
      if (!w_out.empty() || w_format.empty()) print_table(out, t);
      return 0;
    }

    if (synth->parsed()) {
      const auto c = synth_corpus(parse_synth_kind(s_kind), s_size, s_seed);
      save_corpus(s_out, c);
      out << fmt::format("wrote {} tokens to {}\n", c.tokens.size(), s_out);
      return 0;
    }

    if (exporter->parsed()) {
      const auto cfg = eval_config(e_config, e_ckpt, e_data);
      const auto ckpt = load_checkpoint(e_ckpt);
      const auto corpus = load_data(cfg.data);
      const auto probe = make_probe(corpus, cfg.train);
      NoGradGuard no_grad;
      const auto trace = ckpt.model.forward(probe).trace;
      write_trace(e_out, trace);
      out << fmt::format("wrote {} positions x {} states to {}\n", trace.positions(), trace.states.size(), e_out);
      return 0;
    }

    if (config->parsed()) {
      out << dump_config(cf_config.empty() ? ExperimentConfig{} : load_config(cf_config));
      return 0;
    }
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: io: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: internal: " << e.what() << "\n";
    return 1;
  }
  return 64;
}

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace jreg::cli
