#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <utility>

#include "loss_check.hpp"

using namespace vf;
using namespace vf::test;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.vocab_size = 24;
  c.d_model = 8;
  c.n_layers = 3;
  c.n_heads = 2;
  c.max_seq = 24;
  return c;
}

// Replaces s_tau[p, p+n) by added id V+slot; pairs shift by n−1.
LossCase make_case(Rng& rng, const ModelConfig& cfg, std::size_t len, std::size_t n,
                   std::size_t tap = kFullDepth) {
  LossCase c;
  const auto V = static_cast<TokenId>(cfg.vocab_size);
  for (std::size_t k = 0; k < len; ++k) c.s_tau.push_back(static_cast<TokenId>(rng.below(cfg.vocab_size)));
  const std::size_t p = rng.below(len - n - 1);
  c.s_star.assign(c.s_tau.begin(), c.s_tau.begin() + static_cast<std::ptrdiff_t>(p));
  c.s_star.push_back(V);
  c.s_star.insert(c.s_star.end(), c.s_tau.begin() + static_cast<std::ptrdiff_t>(p + n), c.s_tau.end());
  for (std::size_t i = p + 1; i < c.s_star.size(); ++i) c.map.pairs.push_back({i, i + n - 1});
  c.map.occurrences.push_back({p, V, p, p + n});
  c.added_in = random_tensor<double>(rng, {2, cfg.d_model});
  c.added_out = Tensor<double>({2, cfg.d_model});
  c.tap = tap;
  return c;
}

AlignmentMap pairs(std::vector<AlignPair> ps) {
  AlignmentMap m;
  m.pairs = std::move(ps);
  return m;
}

}  // namespace

TEST_CASE("random init draws per-channel normals") {
  Tensor<double> constant({3, 2}, {1, 5, 1, 5, 1, 5});
  auto same = init_random(constant, 4, 1);
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(same(r, 0) == 1.0);
    CHECK(same(r, 1) == 5.0);
  }

  Rng rng(3);
  Tensor<double> table({50, 4});
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t c = 0; c < 4; ++c) table(r, c) = rng.normal() * (c + 1) + 2.0 * c;
  auto rows = init_random(table, 10000, 7);
  for (std::size_t c = 0; c < 4; ++c) {
    double mu = 0, sd = 0, got = 0;
    for (std::size_t r = 0; r < 50; ++r) mu += table(r, c) / 50;
    for (std::size_t r = 0; r < 50; ++r) sd += (table(r, c) - mu) * (table(r, c) - mu) / 50;
    sd = std::sqrt(sd);
    for (std::size_t r = 0; r < 10000; ++r) got += rows(r, c) / 10000;
    CHECK(std::abs(got - mu) <= 3 * sd / 100);
  }
  CHECK(init_random(table, 5, 7) == init_random(table, 5, 7));
  Tensor<double> one({1, 3});
  CHECK_THROWS_AS(init_random(one, 1, 0), Error);
}

TEST_CASE("subtoken mean") {
  Tensor<double> t({2, 2}, {1, 3, 3, 5});
  std::vector<TokenId> both{0, 1}, single{1};
  CHECK(init_subtoken_mean(t, both) == std::vector<double>{2, 4});
  CHECK(init_subtoken_mean(t, single) == std::vector<double>{3, 5});

  Rng rng(4);
  auto big = random_tensor<float>(rng, {30, 16});
  std::vector<TokenId> ids{3, 17, 3, 29, 0};
  auto got = init_subtoken_mean(big, ids);
  for (std::size_t c = 0; c < 16; ++c) {
    double s = 0;
    for (TokenId id : ids) s += big(static_cast<std::size_t>(id), c);
    CHECK(std::abs(got[c] - s / 5) <= 1e-7 * std::max(1.0, std::abs(s / 5)));
  }
}

TEST_CASE("distillation loss arithmetic") {
  Tensor<double> teacher({1, 2}, {1, 0}), student({1, 2}, {0, 0});
  auto r = td_loss(teacher, student, pairs({{0, 0}}));
  CHECK(r.value == 1.0);
  CHECK(r.grad(0, 0) == -2.0);
  CHECK(r.grad(0, 1) == 0.0);
  CHECK_THROWS_AS(td_loss(teacher, student, AlignmentMap{}), Error);

  // Pair order does not matter.
  Rng rng(5);
  auto t = random_tensor<double>(rng, {12, 6}), s = random_tensor<double>(rng, {10, 6});
  std::vector<AlignPair> ps;
  for (std::size_t i = 2; i < 10; ++i) ps.push_back({i, i + 2});
  const double base = td_loss(t, s, pairs(ps)).value;
  for (int k = 0; k < 20; ++k) {
    rng.shuffle(ps.begin(), ps.end());
    CHECK(td_loss(t, s, pairs(ps)).value == doctest::Approx(base).epsilon(1e-7));
  }
}

TEST_CASE("logit MSE ignores added channels") {
  Rng rng(6);
  auto teacher = random_tensor<double>(rng, {5, 6});
  Tensor<double> student({5, 8});
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 6; ++c) student(i, c) = teacher(i, c);
  auto m = pairs({{1, 1}, {3, 3}, {4, 4}});
  CHECK(logit_mse_loss(teacher, student, m).value == 0.0);
  student(3, 7) = 100.0;
  CHECK(logit_mse_loss(teacher, student, m).value == 0.0);

  auto s2 = random_tensor<double>(rng, {4, 8});
  auto m2 = pairs({{1, 2}, {3, 4}});
  double direct = 0;
  for (auto [i, j] : m2.pairs)
    for (std::size_t c = 0; c < 6; ++c) direct += std::pow(s2(i, c) - teacher(j, c), 2);
  CHECK(logit_mse_loss(teacher, s2, m2).value == doctest::Approx(direct / 2).epsilon(1e-12));
  CHECK_THROWS_AS(logit_mse_loss(Tensor<double>(), s2, m2), Error);
}

TEST_CASE("KL divergence") {
  Rng rng(7);
  auto a = random_tensor<double>(rng, {3, 5});
  auto m = pairs({{0, 0}, {1, 1}, {2, 2}});
  CHECK(kl_loss(a, a, m).value == 0.0);
  for (int trial = 0; trial < 10000; ++trial) {
    auto t = random_tensor<double>(rng, {1, 4}, 3.0);
    auto s = random_tensor<double>(rng, {1, 6}, 3.0);
    CHECK(kl_loss(t, s, pairs({{0, 0}})).value >= 0.0);
  }
  Tensor<double> uniform({1, 4}), peaked({1, 4}, {10, 0, 0, 0});
  const double z = std::exp(10.0) + 3;
  const double p[4] = {std::exp(10.0) / z, 1 / z, 1 / z, 1 / z};
  double direct = 0;
  for (double pi : p) direct += 0.25 * std::log(0.25 / pi);
  CHECK(kl_loss(uniform, peaked, pairs({{0, 0}})).value == doctest::Approx(direct).epsilon(1e-12));
}

TEST_CASE("next-token loss") {
  // Zero logits over V* = 7 columns: every position costs ln 7.
  Tensor<double> flat({4, 7});
  std::vector<TokenId> ids{0, 3, 6, 2};
  CHECK(ntp_loss(flat, ids).value == doctest::Approx(std::log(7.0)).epsilon(1e-12));
  // With only 5 columns, the target 6 has no column and is skipped.
  Tensor<double> narrow({4, 5});
  CHECK(ntp_loss(narrow, ids).value == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  std::vector<TokenId> one{1};
  Tensor<double> row({1, 5});
  CHECK_THROWS_AS(ntp_loss(row, one), Error);

  ObjectiveConfig cfg;
  cfg.kind = ObjectiveKind::NTPMasked;
  auto r = ntp_routing(cfg);
  CHECK(r.added_input);
  CHECK_FALSE(r.all_input);
  CHECK_FALSE(r.output_table);
  CHECK(r.layers.empty());
  cfg.kind = ObjectiveKind::NTPAll;
  r = ntp_routing(cfg);
  CHECK(r.all_input);
  CHECK(r.output_table);
  CHECK(r.layers.empty());
  cfg.output_mode = OutputMode::Learned;
  cfg.head_only = true;
  r = ntp_routing(cfg);
  CHECK(r.added_output);
  CHECK_FALSE(r.added_input);
  CHECK_FALSE(r.all_input);
}

TEST_CASE("combination rules") {
  auto c = combine(2.0, 4.0, Combine::Autoscaled);
  CHECK(c.alpha == 0.5);
  CHECK(c.value == 4.0);
  auto eq = combine(3.0, 3.0, Combine::Autoscaled);
  CHECK(eq.alpha == 1.0);
  CHECK(eq.value == combine(3.0, 3.0, Combine::Sum).value);
  auto z = combine(1.0, 0.0, Combine::Autoscaled);
  CHECK(z.alpha == 1.0);
  CHECK(z.alpha_fallback);
  CHECK(combine(1.0, 2.0, Combine::Sum).value == 3.0);
  Rng rng(8);
  for (int k = 0; k < 1000; ++k) {
    const double td = rng.uniform() * 10, ntp = rng.uniform() * 10 + 1e-3;
    auto r = combine(td, ntp, Combine::Autoscaled);
    CHECK(std::abs(r.value - 2 * td) <= 1e-12 * td);
  }
}

TEST_CASE("objective config validation") {
  ObjectiveConfig c;
  c.kind = ObjectiveKind::TDKL;
  c.tap_layer = 2;
  CHECK_THROWS_AS(c.validate(3), Error);
  c.tap_layer = 3;
  c.validate(3);
  c.kind = ObjectiveKind::TD;
  c.tap_layer = 4;
  CHECK_THROWS_AS(c.validate(3), Error);
  CHECK(objective_from_string("td_logits") == ObjectiveKind::TDLogits);
  CHECK_THROWS_AS(objective_from_string("mse"), Error);
}

TEST_CASE("duplicate token optimum") {
  auto cfg = tiny();
  auto w = Weights<double>::init(cfg, 9);
  Rng rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    LossCase c = make_case(rng, cfg, 14, 1);
    const auto v = static_cast<std::size_t>(c.s_tau[c.map.occurrences[0].span_begin]);
    for (std::size_t k = 0; k < cfg.d_model; ++k) c.added_in(0, k) = w.in_emb(v, k);
    for (auto tap : {std::size_t{1}, std::size_t{3}}) {
      c.tap = tap;
      CHECK(loss_value(w, c, LossKind::TD, c.added_in, 0) <= 1e-9);
      auto wf = w.cast<float>();
      auto g = loss_grad(wf, c, LossKind::TD, nullptr);
      CHECK(l2_norm(std::as_const(g).values()) <= 1e-4);
    }
  }
}

TEST_CASE("loss gradients match finite differences") {
  auto cfg = tiny();
  Rng rng(11);
  for (auto kind : {LossKind::TD, LossKind::LogitMSE, LossKind::KL, LossKind::NTP,
                    LossKind::Autoscaled}) {
    double worst32 = 0, worst64 = 0;
    for (int trial = 0; trial < 12; ++trial) {
      auto w = Weights<double>::init(cfg, 100 + static_cast<std::uint64_t>(trial));
      const std::size_t tap = kind == LossKind::TD && trial % 2 ? 2 : kFullDepth;
      LossCase c = make_case(rng, cfg, 8 + rng.below(10), 1 + rng.below(3), tap);
      worst64 = std::max(worst64, check_loss_grad<double>(w, c, kind, rng, 8, 2).rel);
      worst32 = std::max(worst32, check_loss_grad<float>(w, c, kind, rng, 8, 2).rel);
    }
    INFO(name_of(kind));
    CHECK(worst64 <= 1e-6);
    CHECK(worst32 <= 1e-3);
  }
}

TEST_CASE("new-token table persistence and clamp") {
  auto base = Vocab();
  std::vector<std::string> words{" zq", " xk"};
  auto ev = ExtendedVocab::extend(base, words);
  auto t = NewTokenTable::blank(ev, 4, OutputMode::Learned);
  CHECK(t.size() == 2);
  CHECK(t.tokens[1].id == 259);
  Rng rng(12);
  t.in_emb = random_tensor<float>(rng, {2, 4}, 10.0);
  t.out_emb = random_tensor<float>(rng, {2, 4});
  t.tokens[0].init = "mean";
  t.tokens[0].steps = 17;
  t.max_norm = 1.5;
  t.clamp();
  for (std::size_t r = 0; r < 2; ++r) CHECK(l2_norm(std::as_const(t.in_emb).row(r)) <= 1.5f);
  t.validate();

  const auto path = std::filesystem::temp_directory_path() / "vf_table_test.bin";
  t.save(path);
  CHECK(NewTokenTable::load(path) == t);
  std::filesystem::remove(path);

  auto z = NewTokenTable::blank(ev, 4, OutputMode::Zeros);
  z.out_emb(0, 0) = 1.0f;
  CHECK_THROWS_AS(z.validate(), Error);
}
