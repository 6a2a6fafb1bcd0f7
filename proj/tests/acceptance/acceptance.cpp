// End-to-end acceptance checks. Prints one line per criterion and exits
// non-zero when any of them fails.

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

#include "jreg/cli.hpp"
#include "jreg/detail/rng.hpp"
#include "jreg/errors.hpp"
#include "jreg/logging.hpp"

using namespace jreg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

class Clock {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

bool same_bits(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void cli_or_throw(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  if (cli::run(args, out, err) != 0) throw std::runtime_error("jreg " + args.front() + " failed: " + err.str());
  std::cerr << out.str();
}

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j) + 1.0;
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double summary_value(const fs::path& run_dir, const char* key) {
  nlohmann::json j;
  std::ifstream(run_dir / "summary.json") >> j;
  return j.at(key).get<double>();
}

HiddenTrace random_trace(detail::Rng& rng, std::size_t layers, std::size_t rows, std::size_t d) {
  HiddenTrace t;
  for (std::size_t l = 0; l <= layers; ++l) {
    std::vector<double> v(rows * d);
    for (auto& x : v) x = rng.normal();
    t.states.push_back(Tensor::from({rows, d}, std::move(v)));
  }
  return t;
}

// ---- criteria -------------------------------------------------------------

Outcome metric_oracles() {
  detail::Rng rng(2024);
  double worst_zeta = 0.0;
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t L = 2 + rng.below(31);
    DisplacementProfile p;
    p.n_positions = 1;
    // profiles from real displacements of random vector chains
    const std::size_t d = 1 + rng.below(16);
    std::vector<std::vector<double>> h(L + 1, std::vector<double>(d));
    for (auto& row : h) {
      for (auto& x : row) x = rng.normal();
    }
    auto norm = [](const std::vector<double>& v) {
      double s = 0;
      for (double x : v) s += x * x;
      return std::sqrt(s);
    };
    for (std::size_t l = 1; l <= L; ++l) {
      const double psi = displacement(h[l - 1], h[l]);
      if (!(psi >= 0.0 && psi <= 1.0)) ++violations;
      if (std::abs(psi - displacement(h[l], h[l - 1])) > 1e-12) ++violations;
      auto scaled = h[l];
      const double c = std::exp(3.0 * rng.normal());
      for (auto& x : scaled) x *= c;
      // the cosine guard ε is the only scale-dependent term
      const double tol = 1e-12 + kCosineEpsilon / (norm(h[l - 1]) * norm(h[l]) * std::min(1.0, c));
      if (std::abs(psi - displacement(h[l - 1], scaled)) > tol) ++violations;
      p.values.push_back(psi);
    }
    double prev = -1.0;
    for (std::size_t ell = L; ell >= 2; --ell) {
      double brute = 0.0;
      for (std::size_t k = ell; k <= L; ++k) {
        const double diff = p.values[k - 1] - p.values[k - 2];
        if (diff > 0.0) brute += diff;
      }
      brute *= 100.0;
      const double z = jump_rate(p, ell);
      worst_zeta = std::max(worst_zeta, std::abs(z - brute) / std::max(1.0, std::abs(brute)));
      if (z < prev) ++violations;
      prev = z;
    }
  }
  return {worst_zeta <= 1e-12 && violations == 0,
          fmt::format("worst zeta error {:.2e}, property violations {}", worst_zeta, violations)};
}

Outcome gradient_check() {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 4;
  c.d_ffn = 16;
  c.vocab_size = 17;
  c.max_seq_len = 16;
  detail::Rng rng(7);
  TokenBatch batch;
  batch.batch = 1;
  batch.seq_len = 5;
  for (int i = 0; i < 5; ++i) {
    batch.tokens.push_back(static_cast<std::int32_t>(rng.below(17)));
    batch.targets.push_back(static_cast<std::int32_t>(rng.below(17)));
  }
  double worst = 0.0;
  std::string where;
  for (const double weight_scale : {1.0, 20.0}) {
    auto m = Model::init(c, 7);
    std::vector<Tensor> params;
    for (auto& p : m.parameters()) {
      if (p.tensor.rank() == 2) {
        for (auto& x : p.tensor.mutable_data()) x *= weight_scale;
      }
      p.tensor.set_requires_grad(true);
      params.push_back(p.tensor);
    }
    for (const double alpha : {0.0, 1.0, 3.0}) {
      JregConfig j;
      j.alpha = alpha;
      j.lambda = 1.0;
      const auto r = finite_diff_report(
          [&] {
            const auto f = m.forward(batch);
            return jreg_loss(f.logits, batch, f.trace, j).total;
          },
          params);
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        where = fmt::format("alpha {} scale {} {}", alpha, weight_scale, m.parameters()[r.worst_param].name);
      }
    }
  }
  return {worst <= 1e-5, fmt::format("max relative error {:.2e} ({})", worst, where)};
}

Outcome weight_family() {
  std::size_t bad = 0;
  for (std::size_t L = 1; L <= 32; ++L) {
    for (double w : layer_weights(0.0, L).w) bad += std::abs(w - 1.0 / static_cast<double>(L)) > 1e-15;
    for (const double alpha : {0.1, 0.5, 1.0, 3.0, 10.0}) {
      const auto w = layer_weights(alpha, L);
      double s = 0;
      for (double x : w.w) s += x;
      bad += std::abs(s - 1.0) > 1e-12;
      for (std::size_t i = 1; i < L; ++i) bad += !(w.w[i] > w.w[i - 1]);
    }
  }
  detail::Rng rng(50);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t L = 1 + rng.below(12);
    auto t = random_trace(rng, L, 1 + rng.below(8), 2 + rng.below(16));
    const auto w = layer_weights(50.0, L);
    const double a = disp_loss(t, w, JregVariant::weighted).item();
    const double b = disp_loss(t, w, JregVariant::final_only).item();
    worst = std::max(worst, std::abs(a - b));
  }
  return {bad == 0 && worst <= 1e-6, fmt::format("violations {}, max |weighted(50) - final_only| {:.2e}", bad, worst)};
}

struct Runs {
  fs::path dir;
  double base_seconds = 0, jreg_seconds = 0, small_seconds = 0, large_seconds = 0;

  fs::path baseline() const { return dir / "baseline"; }
  fs::path jreg() const { return dir / "jreg"; }
  fs::path steps500() const { return dir / "baseline_b32_500"; }
  fs::path steps2000() const { return dir / "baseline_b8_2000"; }
};

double timed_train(const fs::path& out, std::vector<std::string> args) {
  Clock clock;
  std::vector<std::string> full{"train", "--out-dir", out.string(), "--seed", "0"};
  full.insert(full.end(), args.begin(), args.end());
  fs::remove_all(out);
  cli_or_throw(full);
  return clock.seconds();
}

Outcome jump_suppression(Runs& runs) {
  runs.base_seconds = timed_train(runs.baseline(), {"--variant", "off", "--checkpoint-every", "500"});
  runs.jreg_seconds = timed_train(runs.jreg(), {"--variant", "weighted", "--alpha", "1", "--lambda", "1"});
  const double zb = summary_value(runs.baseline(), "zeta_L");
  const double zj = summary_value(runs.jreg(), "zeta_L");
  const double minutes = (runs.base_seconds + runs.jreg_seconds) / 60.0;
  const bool ok = zj <= std::max(0.5, 0.25 * zb) && zb > zj && minutes <= 30.0;
  return {ok, fmt::format("zeta_L baseline {:.3f}, jreg {:.3f}; probe CE baseline {:.3f}, jreg {:.3f}; {:.1f} min", zb,
                          zj, summary_value(runs.baseline(), "probe_ce"), summary_value(runs.jreg(), "probe_ce"),
                          minutes)};
}

Outcome step_amplification(Runs& runs) {
  runs.small_seconds =
      timed_train(runs.steps500(), {"--variant", "off", "--batch-size", "32", "--steps", "500", "--warmup", "25"});
  runs.large_seconds =
      timed_train(runs.steps2000(), {"--variant", "off", "--batch-size", "8", "--steps", "2000", "--warmup", "100"});
  const double z500 = summary_value(runs.steps500(), "zeta_L");
  const double z2000 = summary_value(runs.steps2000(), "zeta_L");
  const double minutes = (runs.small_seconds + runs.large_seconds) / 60.0;
  return {z2000 > z500 && minutes <= 30.0,
          fmt::format("zeta_L 500 steps {:.3f}, 2000 steps {:.3f}; {:.1f} min", z500, z2000, minutes)};
}

Outcome trajectory_trend(const Runs& runs) {
  const auto out = runs.dir / "trajectory.csv";
  cli_or_throw({"trajectory", "--checkpoints", runs.baseline().string(), "--out", out.string()});
  const auto z = read_report(runs.dir / "trajectory_zeta.csv");
  std::vector<double> steps, zeta;
  std::string seq;
  for (const auto& row : z.rows) {
    steps.push_back(row[0]);
    zeta.push_back(row[1]);
    seq += fmt::format("{}{}:{:.2f}", seq.empty() ? "" : " ", row[0], row[1]);
  }
  const bool quartiles = steps == std::vector<double>{500, 1000, 1500, 2000};
  const double rho = spearman(steps, zeta);
  return {quartiles && rho > 0.0, fmt::format("spearman {:.3f} over {}", rho, seq)};
}

Outcome early_exit(const Runs& runs) {
  const auto ckpt = checkpoint_path(runs.baseline(), 2000);
  const auto out = runs.dir / "layer_skip.csv";
  Clock clock;
  cli_or_throw({"layer-skip", "--checkpoint", ckpt.string(), "--out", out.string()});
  const double secs = clock.seconds();
  const auto t = read_report(out);
  const double standard = summary_value(runs.baseline(), "final_validation_loss");
  bool finite = true;
  std::string losses;
  for (const auto& row : t.rows) {
    finite = finite && std::isfinite(row[1]);
    losses += fmt::format("{}{:.3f}", losses.empty() ? "" : " ", row[1]);
  }
  const bool exact = !t.rows.empty() && same_bits(t.rows.back()[1], standard);
  return {exact && finite && t.rows.size() == 5 && secs < 60.0,
          fmt::format("exit losses [{}], last {} standard, {:.1f} s", losses, exact ? "==" : "!=", secs)};
}

Outcome redistribution(const Runs& runs) {
  const auto a = read_profile(runs.jreg() / "profile.csv");
  const auto b = read_profile(runs.baseline() / "profile.csv");
  const auto delta = redundancy_delta(a, b);
  const std::size_t L = delta.size();
  std::string ds;
  bool middle_positive = false;
  for (std::size_t l = 1; l <= L; ++l) {
    ds += fmt::format("{}{:+.4f}", ds.empty() ? "" : " ", delta[l - 1]);
    if (l > 1 && l < L && delta[l - 1] > 0.0) middle_positive = true;
  }
  return {delta[L - 1] < 0.0,
          fmt::format("delta [{}]; middle layer with delta > 0: {}", ds, middle_positive ? "yes" : "no")};
}

Outcome determinism(const fs::path& dir) {
  Clock clock;
  cli::ExperimentConfig cfg;
  cfg.train.total_steps = 100;
  cfg.train.warmup_steps = 10;
  cfg.train.eval_every = 0;
  const auto corpus = cli::load_data(cfg.data);
  const auto init = Model::init(cfg.model, cfg.train.seed);

  const auto a = train(init, corpus, cfg.train, cfg.jreg);
  const auto b = train(init, corpus, cfg.train, cfg.jreg);
  bool identical = a.history.size() == 100 && b.history.size() == 100;
  for (std::size_t i = 0; identical && i < a.history.size(); ++i) {
    identical = same_bits(a.history[i].total, b.history[i].total) && same_bits(a.history[i].ce, b.history[i].ce);
  }

  fs::create_directories(dir);
  Trainer first(init, corpus, cfg.train, cfg.jreg);
  first.run_until(50);
  const auto mid = first.save(dir / "mid.bin");
  auto resumed = Trainer::resume(load_checkpoint(mid), corpus, cfg.train, cfg.jreg);
  resumed.run();
  double worst = 0.0;
  for (std::size_t i = 0; i < resumed.history().size(); ++i) {
    worst = std::max(worst, std::abs(resumed.history()[i].total - a.history[50 + i].total));
  }
  const auto pa = a.model.parameters(), pr = resumed.model().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    for (std::size_t j = 0; j < pa[i].tensor.numel(); ++j) {
      worst = std::max(worst, std::abs(pa[i].tensor.at(j) - pr[i].tensor.at(j)));
    }
  }
  const bool resume_ok = resumed.history().size() == 50 && worst <= 1e-12;

  // binary formats
  bool formats = true;
  const auto final_ckpt = resumed.save(dir / "final.bin");
  const auto loaded = load_checkpoint(final_ckpt);
  save_checkpoint(dir / "final2.bin", loaded.model, &*loaded.optimizer, loaded.progress);
  formats = formats && slurp(final_ckpt) == slurp(dir / "final2.bin");
  const auto pl = loaded.model.parameters();
  for (std::size_t i = 0; i < pr.size(); ++i) formats = formats && same_bits(pl[i].tensor.data(), pr[i].tensor.data());

  save_corpus(dir / "corpus.bin", corpus);
  const auto c2 = load_corpus(dir / "corpus.bin", cfg.data.validation_fraction);
  formats = formats && c2.tokens == corpus.tokens && c2.train_end == corpus.train_end;
  save_corpus(dir / "corpus2.bin", c2);
  formats = formats && slurp(dir / "corpus.bin") == slurp(dir / "corpus2.bin");

  const auto probe = make_probe(corpus, cfg.train);
  HiddenTrace trace;
  {
    NoGradGuard guard;
    trace = loaded.model.forward(probe).trace;
  }
  write_trace(dir / "trace.bin", trace);
  const auto t2 = read_trace(dir / "trace.bin");
  write_trace(dir / "trace2.bin", t2);
  formats = formats && slurp(dir / "trace.bin") == slurp(dir / "trace2.bin");
  for (std::size_t l = 0; l < trace.states.size(); ++l) {
    for (std::size_t i = 0; i < trace.states[l].numel(); ++i) {
      formats = formats && static_cast<double>(static_cast<float>(trace.states[l].at(i))) == t2.states[l].at(i);
    }
  }
  const double secs = clock.seconds();
  return {identical && resume_ok && formats && secs < 300.0,
          fmt::format("bitwise repeat {}, resume max diff {:.2e}, format round trips {}, {:.0f} s",
                      identical ? "yes" : "no", worst, formats ? "ok" : "broken", secs)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("jreg acceptance checks");
  std::string work_dir = "acceptance_runs";
  std::vector<int> only;
  app.add_option("--work-dir", work_dir, "Directory for training runs");
  app.add_option("--only", only, "Run only these criteria (the training criteria 6-8 need 4)");
  CLI11_PARSE(app, argc, argv);
  init_logging();

  Runs runs;
  runs.dir = fs::absolute(work_dir);
  fs::create_directories(runs.dir);

  auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
  const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
      {1, metric_oracles},
      {2, gradient_check},
      {3, weight_family},
      {4, [&] { return jump_suppression(runs); }},
      {5, [&] { return step_amplification(runs); }},
      {6, [&] { return trajectory_trend(runs); }},
      {7, [&] { return early_exit(runs); }},
      {8, [&] { return redistribution(runs); }},
      {9, [&] { return determinism(runs.dir / "determinism"); }},
  };

  int failures = 0;
  for (const auto& [n, check] : criteria) {
    if (!wanted(n)) continue;
    Clock clock;
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << fmt::format("criterion {}: {}  {}  [{:.1f} s]", n, o.pass ? "PASS" : "FAIL", o.detail,
                             clock.seconds())
              << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : fmt::format("{} criteria failed", failures)) << std::endl;
  return failures == 0 ? 0 : 1;
}
