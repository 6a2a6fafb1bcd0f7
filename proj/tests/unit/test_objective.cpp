#include <doctest.h>

#include <cmath>

#include "jreg/errors.hpp"
#include "jreg/metrics.hpp"
#include "jreg/objective.hpp"
#include "support.hpp"

using namespace jreg;

namespace {

HiddenTrace random_trace(detail::Rng& rng, std::size_t layers, std::size_t rows, std::size_t d) {
  HiddenTrace t;
  for (std::size_t l = 0; l <= layers; ++l) t.states.push_back(test::randn(rng, {rows, d}));
  return t;
}

}  // namespace

TEST_CASE("layer weight examples") {
  const auto u = layer_weights(0.0, 12);
  for (double w : u.w) CHECK(w == doctest::Approx(1.0 / 12.0).epsilon(1e-15));
  const auto a1 = layer_weights(1.0, 3);
  CHECK(std::abs(a1.w[0] - 0.09003057) <= 1e-8);
  CHECK(std::abs(a1.w[1] - 0.24472847) <= 1e-8);
  CHECK(std::abs(a1.w[2] - 0.66524096) <= 1e-8);
  const auto a10 = layer_weights(10.0, 4);
  CHECK(a10.w[3] > 0.9999);
  CHECK(a10.w[3] == doctest::Approx(1.0 / (1.0 + std::exp(-10.0) + std::exp(-20.0) + std::exp(-30.0))).epsilon(1e-15));
  CHECK_THROWS_AS(layer_weights(1.0, 0), ContractError);
  CHECK_THROWS_AS(layer_weights(-0.5, 3), ContractError);
}

TEST_CASE("layer weight properties over the alpha grid") {
  const double grid[] = {0.0, 0.1, 0.3, 0.5, 1.0, 3.0};
  for (std::size_t L : {1u, 2u, 4u, 12u, 32u}) {
    double prev_last = -1.0;
    for (double alpha : grid) {
      const auto w = layer_weights(alpha, L);
      double s = 0;
      for (double x : w.w) {
        CHECK(x > 0.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
      for (std::size_t i = 1; i < L; ++i) {
        if (alpha > 0) CHECK(w.w[i] > w.w[i - 1]);
        else CHECK(w.w[i] == w.w[0]);
      }
      if (L > 1) CHECK(w.w[L - 1] > prev_last);
      prev_last = w.w[L - 1];
    }
  }
}

TEST_CASE("cross entropy examples") {
  TokenBatch b;
  b.batch = 1;
  b.seq_len = 2;
  b.tokens = {0, 1};
  b.targets = {3, 5};
  CHECK(ce_loss(Tensor::zeros({1, 2, 17}), b).item() == doctest::Approx(std::log(17.0)).epsilon(1e-14));

  std::vector<double> sharp(2 * 17, -50.0);
  sharp[3] = 50.0;
  sharp[17 + 5] = 50.0;
  CHECK(ce_loss(Tensor::from({1, 2, 17}, sharp), b).item() < 1e-40);

  b.mask = {0, 0};
  CHECK_THROWS_AS(ce_loss(Tensor::zeros({1, 2, 17}), b), ContractError);
}

TEST_CASE("cross entropy matches a log-sum-exp oracle") {
  detail::Rng rng(5);
  auto logits = test::randn(rng, {2, 3, 5}, false, 3.0);
  TokenBatch b;
  b.batch = 2;
  b.seq_len = 3;
  b.tokens.assign(6, 0);
  for (int i = 0; i < 6; ++i) b.targets.push_back(static_cast<std::int32_t>(rng.below(5)));
  for (const bool masked : {false, true}) {
    b.mask = masked ? std::vector<std::uint8_t>{1, 0, 1, 1, 0, 1} : std::vector<std::uint8_t>{};
    double acc = 0;
    int n = 0;
    for (std::size_t r = 0; r < 6; ++r) {
      if (masked && !b.mask[r]) continue;
      double mx = -1e300;
      for (std::size_t k = 0; k < 5; ++k) mx = std::max(mx, logits.at(r * 5 + k));
      double z = 0;
      for (std::size_t k = 0; k < 5; ++k) z += std::exp(logits.at(r * 5 + k) - mx);
      acc += mx + std::log(z) - logits.at(r * 5 + static_cast<std::size_t>(b.targets[r]));
      ++n;
    }
    CHECK(std::abs(ce_loss(logits, b).item() - acc / n) <= 1e-12);
  }
}

TEST_CASE("displacement loss examples") {
  HiddenTrace same;
  auto s = Tensor::from({2, 2}, {1, 2, 3, 4});
  same.states = {s, s, s};
  CHECK(disp_loss(same, layer_weights(1.0, 2), JregVariant::weighted).item() <= 1e-12);

  // states with Ψ_1 = 0.2, Ψ_2 = 0.4 on a single position
  auto rotated = [](double angle) { return Tensor::from({1, 2}, {std::cos(angle), std::sin(angle)}); };
  const double a1 = std::acos(1.0 - 2.0 * 0.2), a2 = std::acos(1.0 - 2.0 * 0.4);
  HiddenTrace t;
  t.states = {rotated(0.0), rotated(a1), rotated(a1 + a2)};
  const auto p = profile(t);
  CHECK(std::abs(p.psi(1) - 0.2) <= 1e-12);
  CHECK(std::abs(p.psi(2) - 0.4) <= 1e-12);
  CHECK(std::abs(disp_loss(t, layer_weights(0.0, 2), JregVariant::weighted).item() - 0.3) <= 1e-12);
  CHECK(std::abs(disp_loss(t, layer_weights(0.0, 2), JregVariant::final_only).item() - 0.4) <= 1e-12);
  CHECK_THROWS_AS(disp_loss(t, layer_weights(0.0, 3), JregVariant::weighted), ContractError);
}

TEST_CASE("weighted loss at large alpha approaches the final-only variant") {
  detail::Rng rng(9);
  for (std::size_t L = 1; L <= 12; ++L) {
    const auto t = random_trace(rng, L, 3 + rng.below(5), 2 + rng.below(8));
    const double w = disp_loss(t, layer_weights(50.0, L), JregVariant::weighted).item();
    const double f = disp_loss(t, layer_weights(50.0, L), JregVariant::final_only).item();
    CHECK(std::abs(w - f) <= 1e-6);
  }
}

TEST_CASE("displacement loss is a convex combination of profile values") {
  detail::Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t L = 1 + rng.below(8);
    const auto t = random_trace(rng, L, 1 + rng.below(6), 1 + rng.below(6));
    const double alpha = rng.uniform() * 4.0;
    const auto w = layer_weights(alpha, L);
    const double d = disp_loss(t, w, JregVariant::weighted).item();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    const auto p = profile(t);
    double ref = 0;
    for (std::size_t l = 1; l <= L; ++l) ref += w.w[l - 1] * p.psi(l);
    CHECK(std::abs(d - ref) <= 1e-12);
  }
}

TEST_CASE("padding rows do not enter the displacement loss") {
  detail::Rng rng(12);
  auto t = random_trace(rng, 2, 4, 3);
  t.mask = {1, 0, 0, 1};
  HiddenTrace sub;
  for (const auto& s : t.states) sub.states.push_back(gather_rows(s, std::vector<std::int32_t>{0, 3}));
  const auto w = layer_weights(1.0, 2);
  CHECK(disp_loss(t, w, JregVariant::weighted).item() ==
        doctest::Approx(disp_loss(sub, w, JregVariant::weighted).item()).epsilon(1e-15));
}

TEST_CASE("combined loss") {
  detail::Rng rng(13);
  auto m = Model::init(test::tiny_config(), 13);
  auto batch = test::random_batch(rng, 1, 5, 17);
  const auto fwd = m.forward(batch);

  JregConfig cfg;
  cfg.lambda = 0.0;
  auto l0 = jreg_loss(fwd.logits, batch, fwd.trace, cfg);
  CHECK(l0.total.impl() == l0.ce.impl());
  cfg.lambda = 1.0;
  cfg.variant = JregVariant::off;
  auto loff = jreg_loss(fwd.logits, batch, fwd.trace, cfg);
  CHECK(loff.total.item() == loff.ce.item());
  CHECK(loff.disp.item() > 0.0);

  cfg.variant = JregVariant::weighted;
  auto l1 = jreg_loss(fwd.logits, batch, fwd.trace, cfg);
  CHECK(l1.total.item() == doctest::Approx(l1.ce.item() + l1.disp.item()).epsilon(1e-15));
  cfg.lambda = 2.5;
  auto l2 = jreg_loss(fwd.logits, batch, fwd.trace, cfg);
  CHECK(l2.total.item() == doctest::Approx(l2.ce.item() + 2.5 * l2.disp.item()).epsilon(1e-15));

  cfg.alpha = -1.0;
  CHECK_THROWS_AS(jreg_loss(fwd.logits, batch, fwd.trace, cfg), ContractError);
  CHECK(parse_variant("final_only") == JregVariant::final_only);
  CHECK_THROWS_AS(parse_variant("final"), ContractError);
}

TEST_CASE("variant off contributes no gradient") {
  detail::Rng rng(14);
  auto ma = Model::init(test::tiny_config(), 14);
  auto mb = ma.clone();
  test::require_grad(ma);
  test::require_grad(mb);
  auto batch = test::random_batch(rng, 1, 5, 17);
  JregConfig off;
  off.variant = JregVariant::off;
  const auto fa = ma.forward(batch);
  jreg_loss(fa.logits, batch, fa.trace, off).total.backward();
  ce_loss(mb.forward(batch).logits, batch).backward();
  const auto pa = ma.parameters(), pb = mb.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(test::bitwise_equal(pa[i].tensor.grad(), pb[i].tensor.grad()));
}

TEST_CASE("gradient checks of every objective on the tiny model") {
  detail::Rng rng(15);
  auto m = Model::init(test::tiny_config(), 15);
  test::scale_weights(m, 20.0);
  test::require_grad(m);
  auto batch = test::random_batch(rng, 1, 5, 17);
  auto params = test::param_tensors(m);

  CHECK(finite_diff_check([&] { return ce_loss(m.forward(batch).logits, batch); }, params) <= 1e-5);
  for (const auto variant : {JregVariant::weighted, JregVariant::final_only}) {
    CHECK(finite_diff_check([&] { return disp_loss(m.forward(batch).trace, layer_weights(1.0, 2), variant); },
                            params) <= 1e-5);
  }
  for (const double alpha : {0.0, 1.0, 3.0}) {
    JregConfig cfg;
    cfg.alpha = alpha;
    const auto r = finite_diff_report(
        [&] {
          const auto f = m.forward(batch);
          return jreg_loss(f.logits, batch, f.trace, cfg).total;
        },
        params);
    INFO("alpha " << alpha << " worst " << m.parameters()[r.worst_param].name);
    CHECK(r.max_rel_error <= 1e-5);
  }
}

TEST_CASE("detached inputs change the gradient but not the value") {
  detail::Rng rng(16);
  auto m = Model::init(test::tiny_config(), 16);
  test::scale_weights(m, 20.0);
  test::require_grad(m);
  auto batch = test::random_batch(rng, 1, 5, 17);
  const auto w = layer_weights(1.0, 2);
  const auto f1 = m.forward(batch);
  const Tensor full = disp_loss(f1.trace, w, JregVariant::weighted, false);
  const Tensor det = disp_loss(f1.trace, w, JregVariant::weighted, true);
  CHECK(full.item() == det.item());
  full.backward();
  const std::vector<double> g_full(m.token_embedding.grad().begin(), m.token_embedding.grad().end());
  for (auto& p : m.parameters()) p.tensor.zero_grad();
  det.backward();
  CHECK_FALSE(test::bitwise_equal(g_full, m.token_embedding.grad()));
}
