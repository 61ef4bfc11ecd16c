#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "oracle.hpp"
#include "vf/model.hpp"

using namespace vf;
using vf::test::rel_err;

namespace {

ModelConfig tiny(bool tied = false) {
  ModelConfig c;
  c.vocab_size = 20;
  c.d_model = 8;
  c.n_layers = 2;
  c.n_heads = 2;
  c.max_seq = 16;
  c.tied = tied;
  return c;
}

std::vector<TokenId> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> ids(n);
  for (auto& id : ids) id = static_cast<TokenId>(rng.below(vocab));
  return ids;
}

std::filesystem::path tmp(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("vf_model_" + name);
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary | std::ios::trunc).write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename F>
ErrorKind kind_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("no error thrown");
  return ErrorKind::Usage;
}

// Scalar probe: Σ Wt ⊙ H^(tap) + Σ Wl ⊙ logits.
template <typename T>
double probe(const Weights<T>& w, const std::vector<TokenId>& ids, const ForwardOptions& fo,
             const AddedRows<T>& added, const Tensor<double>& wt, const Tensor<double>* wl) {
  auto tr = forward(w, ids, fo, added);
  double s = vf::test::weighted_sum(tr.tap(), wt);
  if (wl) s += vf::test::weighted_sum(*tr.logits, *wl);
  return s;
}

}  // namespace

TEST_CASE("config validation") {
  auto c = tiny();
  c.n_heads = 3;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
  c = tiny();
  c.n_layers = 0;
  CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
  CHECK(ModelConfig::from_json(tiny(true).to_json()) == tiny(true));
}

TEST_CASE("embedding lookup and input errors") {
  auto w = Weights<float>::init(tiny(), 1);
  for (TokenId id : {0, 7, 19}) {
    std::vector<TokenId> ids{id};
    auto tr = forward(w, ids);
    CHECK(std::equal(tr.hidden[0].values().begin(), tr.hidden[0].values().end(),
                     w.in_emb.row(static_cast<std::size_t>(id)).begin()));
  }
  std::vector<TokenId> bad{3, 20};
  CHECK(kind_of([&] { forward(w, bad); }) == ErrorKind::Id);
  std::vector<TokenId> lng(17, 1);
  CHECK(kind_of([&] { forward(w, lng); }) == ErrorKind::Length);
  std::vector<TokenId> ok{1, 2};
  ForwardOptions fo;
  fo.tap_layer = 3;
  CHECK(kind_of([&] { forward(w, ok, fo); }) == ErrorKind::Usage);
  auto tr = forward(w, ok);
  Tensor<float> up({2, 8});
  CHECK(kind_of([&] { backward(w, tr, Upstream<float>{&up, nullptr}, GradRequest{}); }) ==
        ErrorKind::Cache);
}

TEST_CASE("tap layers agree with a full forward bit for bit") {
  auto cfg = tiny();
  cfg.n_layers = 4;
  auto w = Weights<float>::init(cfg, 2);
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    auto ids = random_ids(rng, 1 + rng.below(16), 20);
    ForwardOptions full;
    full.pre_norm_tap = true;
    auto ref = forward(w, ids, full);
    for (std::size_t l = 1; l <= 4; ++l) {
      ForwardOptions fo;
      fo.tap_layer = l;
      fo.pre_norm_tap = true;
      auto tr = forward(w, ids, fo);
      REQUIRE(tr.hidden.size() == l + 1);
      CHECK(tr.tap() == ref.hidden[l]);
      CHECK_FALSE(tr.logits.has_value());
    }
  }
}

TEST_CASE("causality under random perturbations") {
  auto w = Weights<float>::init(tiny(), 4);
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    auto ids = random_ids(rng, 2 + rng.below(15), 20);
    const auto p = 1 + rng.below(ids.size() - 1);
    auto other = ids;
    for (auto i = p; i < other.size(); ++i) other[i] = static_cast<TokenId>(rng.below(20));
    ForwardOptions fo;
    fo.need_logits = true;
    auto a = forward(w, ids, fo), b = forward(w, other, fo);
    for (std::size_t l = 0; l < a.hidden.size(); ++l)
      for (std::size_t i = 0; i < p; ++i) {
        auto ra = a.hidden[l].row(i), rb = b.hidden[l].row(i);
        CHECK(std::equal(ra.begin(), ra.end(), rb.begin()));
      }
  }
}

TEST_CASE("tied model with blank blocks scores normalized inputs against E_in") {
  ModelConfig c;
  c.vocab_size = 2;
  c.d_model = 2;
  c.n_heads = 1;
  c.n_layers = 1;
  c.max_seq = 4;
  c.tied = true;
  auto w = Weights<double>::blank(c);
  w.in_emb = Tensor<double>({2, 2}, {1, 0, 0, 2});
  ForwardOptions fo;
  fo.need_logits = true;
  std::vector<TokenId> ids{0, 1};
  auto tr = forward(w, ids, fo);
  // rms([1,0]) = sqrt(1/2), rms([0,2]) = sqrt(2); eps shifts the 6th digit.
  const double r2 = std::sqrt(2.0);
  CHECK((*tr.logits)(0, 0) == doctest::Approx(r2).epsilon(1e-4));
  CHECK((*tr.logits)(0, 1) == doctest::Approx(0.0));
  CHECK((*tr.logits)(1, 0) == doctest::Approx(0.0));
  CHECK((*tr.logits)(1, 1) == doctest::Approx(2 * r2).epsilon(1e-4));
}

TEST_CASE("tied tables share storage") {
  auto w = Weights<float>::init(tiny(true), 6);
  CHECK(&w.out_emb() == &w.in_emb);
  CHECK(w.untied_out.empty());
  ForwardOptions fo;
  fo.need_logits = true;
  std::vector<TokenId> ids{1, 2, 3};
  auto before = forward(w, ids, fo);
  for (auto& v : w.in_emb.row(9)) v += 5.0f;
  CHECK(w.out_emb()(9, 0) == w.in_emb(9, 0));
  auto after = forward(w, ids, fo);
  CHECK((*after.logits)(2, 9) != (*before.logits)(2, 9));
  CHECK((*after.logits)(2, 8) == (*before.logits)(2, 8));
}

TEST_CASE("zero upstream gives zero gradients and the bundle holds only what was asked") {
  auto w = Weights<float>::init(tiny(), 7);
  Tensor<float> extra({2, 8});
  extra.fill(0.3f);
  AddedRows<float> added{&extra, &extra};
  std::vector<TokenId> ids{1, 20, 4, 21, 4};
  ForwardOptions fo;
  fo.need_logits = true;
  fo.keep_cache = true;
  auto tr = forward(w, ids, fo, added);
  Tensor<float> dt({5, 8}), dl({5, 22});
  GradRequest req;
  req.input_rows = {4, 9};
  req.added_input = true;
  auto gb = backward(w, tr, Upstream<float>{&dt, &dl}, req, added);
  CHECK(gb.rows.size() == 2);
  CHECK(gb.rows.count(1) == 0);
  for (auto& [id, g] : gb.rows)
    for (float v : g) CHECK(v == 0.0f);
  for (float v : gb.added_in.values()) CHECK(v == 0.0f);
  CHECK(gb.in_emb.empty());
  CHECK(gb.out_emb.empty());
  CHECK(gb.added_out.empty());
  CHECK(gb.layers.empty());
  CHECK(gb.final_norm.empty());

  auto full = backward(w, tr, Upstream<float>{&dt, &dl}, GradRequest::all_weights(w.config), added);
  for (auto& [l, lg] : full.layers)
    lg.visit([](const char*, const Tensor<float>& t) {
      for (float v : t.values()) CHECK(v == 0.0f);
    });
}

namespace {

// Checks every requested gradient against central differences of the double
// model. Returns the worst relative error.
template <typename T>
double fd_check(const ModelConfig& cfg, std::uint64_t seed, std::size_t tap, bool logits,
                bool pre_norm) {
  Rng rng(seed);
  auto w64 = Weights<double>::init(cfg, seed);
  auto in64 = vf::test::random_tensor<double>(rng, {2, cfg.d_model});
  auto out64 = vf::test::random_tensor<double>(rng, {2, cfg.d_model}, 0.3);
  const std::size_t V = cfg.vocab_size;
  auto ids = random_ids(rng, 3 + rng.below(6), V + 2);
  ids[rng.below(ids.size())] = static_cast<TokenId>(V);
  const std::size_t n = ids.size();
  ForwardOptions fo;
  fo.tap_layer = tap;
  fo.need_logits = logits;
  fo.pre_norm_tap = pre_norm;
  auto wt = vf::test::random_tensor<double>(rng, {n, cfg.d_model});
  Tensor<double> wl;
  if (logits) wl = vf::test::random_tensor<double>(rng, {n, V + 2});

  // Analytic gradient in precision T.
  auto w = w64.template cast<T>();
  auto in = in64.template cast<T>();
  auto out = out64.template cast<T>();
  AddedRows<T> added{&in, logits ? &out : nullptr};
  ForwardOptions fc = fo;
  fc.keep_cache = true;
  auto tr = forward(w, ids, fc, added);
  auto dt = wt.template cast<T>();
  auto dl = wl.template cast<T>();
  GradRequest req = GradRequest::all_weights(cfg);
  req.added_input = true;
  req.added_output = logits;
  req.input_rows = {ids[0] < static_cast<TokenId>(V) ? ids[0] : 0, 1};
  auto gb = backward(w, tr, Upstream<T>{&dt, logits ? &dl : nullptr}, req, added);

  AddedRows<double> added64{&in64, logits ? &out64 : nullptr};
  const Tensor<double>* wlp = logits ? &wl : nullptr;
  double worst = 0;
  auto check = [&](Tensor<double>& param, const Tensor<T>& grad) {
    std::vector<double> fd(param.size());
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double orig = param[i];
      const double h = 1e-5;
      param[i] = orig + h;
      const double fp = probe(w64, ids, fo, added64, wt, wlp);
      param[i] = orig - h;
      const double fm = probe(w64, ids, fo, added64, wt, wlp);
      param[i] = orig;
      fd[i] = (fp - fm) / (2 * h);
    }
    worst = std::max(worst, rel_err(grad.values(), fd));
  };
  check(in64, gb.added_in);
  if (logits) check(out64, gb.added_out);
  for (auto& [id, g] : gb.rows) {
    Tensor<double> row({cfg.d_model});
    auto src = w64.in_emb.row(static_cast<std::size_t>(id));
    std::vector<double> fd(cfg.d_model);
    for (std::size_t k = 0; k < cfg.d_model; ++k) {
      const double orig = src[k];
      src[k] = orig + 1e-5;
      const double fp = probe(w64, ids, fo, added64, wt, wlp);
      src[k] = orig - 1e-5;
      const double fm = probe(w64, ids, fo, added64, wt, wlp);
      src[k] = orig;
      fd[k] = (fp - fm) / 2e-5;
    }
    std::vector<double> a(g.begin(), g.end());
    if (cfg.tied && logits) {
      // The shared table also receives the logit-path term.
      for (std::size_t k = 0; k < cfg.d_model; ++k)
        a[k] += gb.out_emb(static_cast<std::size_t>(id), k);
    }
    worst = std::max(worst, rel_err(a, fd));
  }
  if (!cfg.tied) check(w64.untied_out, gb.out_emb);
  check(w64.final_norm, gb.final_norm);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    std::vector<Tensor<double>*> ps;
    w64.layers[l].visit([&](const char*, Tensor<double>& t) { ps.push_back(&t); });
    std::vector<const Tensor<T>*> gs;
    gb.layers.at(l).visit([&](const char*, const Tensor<T>& t) { gs.push_back(&t); });
    for (std::size_t k = 0; k < ps.size(); ++k) check(*ps[k], *gs[k]);
  }
  return worst;
}

}  // namespace

TEST_CASE("finite differences: every gradient target, 64-bit") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const bool tied = s % 2 == 1;
    CHECK(fd_check<double>(tiny(tied), s, kFullDepth, true, false) <= 1e-6);
    CHECK(fd_check<double>(tiny(tied), s + 100, 1, false, false) <= 1e-6);
    CHECK(fd_check<double>(tiny(tied), s + 200, kFullDepth, false, true) <= 1e-6);
  }
}

TEST_CASE("finite differences: every gradient target, 32-bit") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    const bool tied = s % 2 == 1;
    CHECK(fd_check<float>(tiny(tied), s, kFullDepth, true, false) <= 1e-3);
    CHECK(fd_check<float>(tiny(tied), s + 100, 1, false, false) <= 1e-3);
  }
}

TEST_CASE("generation") {
  auto w = Weights<float>::init(tiny(), 8);
  std::vector<TokenId> prompt{1, 2, 3};
  CHECK(generate(w, prompt, 0) == prompt);

  auto g1 = generate(w, prompt, 10);
  CHECK(g1.size() == 13);
  CHECK(generate(w, prompt, 10) == g1);

  Sampling hot{1.0, 42};
  CHECK(generate(w, prompt, 20, hot) == generate(w, prompt, 20, hot));

  // Huge added output rows would win every argmax if they were scored.
  Rng rng(9);
  Tensor<float> in({3, 8}), out({3, 8});
  for (auto& v : out.values()) v = 50.0f;
  for (auto& v : in.values()) v = static_cast<float>(rng.normal());
  AddedRows<float> added{&in, &out};
  for (int trial = 0; trial < 100; ++trial) {
    auto wt = Weights<float>::init(tiny(), 1000 + static_cast<std::uint64_t>(trial));
    auto p = random_ids(rng, 1 + rng.below(3), 23);
    Sampling s{trial % 2 ? 1.5 : 0.0, static_cast<std::uint64_t>(trial)};
    auto seq = generate(wt, p, 8, s, OutputMode::Exclude, added);
    for (std::size_t i = p.size(); i < seq.size(); ++i) CHECK(seq[i] < 20);
  }
  // A learned row aligned with the final state takes the argmax.
  ForwardOptions fo;
  fo.need_logits = true;
  auto tr = forward(w, std::span<const TokenId>(prompt), fo);
  for (std::size_t k = 0; k < 8; ++k) out(1, k) = 100.0f * tr.hidden.back()(2, k);
  auto learned = generate(w, prompt, 1, {}, OutputMode::Learned, added);
  CHECK(learned.back() == 21);
  CHECK(generate(w, prompt, 1, {}, OutputMode::Zeros, added).back() < 20);
  // Sliding context once the sequence outgrows max_seq.
  CHECK(generate(w, prompt, 30).size() == 33);
}

TEST_CASE("checkpoint roundtrip and corruption") {
  for (bool tied : {false, true}) {
    auto w = Weights<float>::init(tiny(tied), 10);
    const auto path = tmp("ck.bin");
    save_checkpoint(w, path);
    auto back = load_checkpoint(path);
    CHECK(back == w);
    if (tied) CHECK(&back.out_emb() == &back.in_emb);
  }
  auto w = Weights<float>::init(tiny(), 11);
  const auto path = tmp("ck.bin");
  save_checkpoint(w, path);
  const std::string good = slurp(path);

  std::string s = good;
  s[s.size() - 5] ^= 0x01;
  spit(path, s);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::Format);

  s = good;
  s[0] = 'X';
  spit(path, s);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::Format);

  s = good;
  s[4] = 2;
  spit(path, s);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::Format);

  spit(path, good.substr(0, good.size() - 100));
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::Format);

  // Rewrite the header with one tensor's nbytes off by four.
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, good.data() + 8, 8);
  auto header = nlohmann::json::parse(good.substr(16, hlen));
  header["tensors"][1]["nbytes"] = header["tensors"][1]["nbytes"].get<std::uint64_t>() + 4;
  const std::string h2 = header.dump();
  std::string patched = good.substr(0, 8);
  const std::uint64_t l2 = h2.size();
  patched.append(reinterpret_cast<const char*>(&l2), 8);
  patched += h2 + good.substr(16 + hlen);
  spit(path, patched);
  CHECK(kind_of([&] { load_checkpoint(path); }) == ErrorKind::Format);
  std::filesystem::remove(path);
}

TEST_CASE("pretraining is seeded and lowers the loss") {
  auto cfg = tiny();
  std::vector<TokenId> stream;
  for (int r = 0; r < 40; ++r)
    for (TokenId t : {1, 5, 9, 2, 7, 5, 3}) stream.push_back(t);
  PretrainOptions po;
  po.steps = 0;
  CHECK(pretrain_fixture(cfg, stream, po).weights == Weights<float>::init(cfg, po.seed));

  po.steps = 60;
  po.batch = 2;
  po.seq_len = 12;
  po.warmup = 5;
  po.lr = 1e-2;
  auto a = pretrain_fixture(cfg, stream, po);
  auto b = pretrain_fixture(cfg, stream, po);
  CHECK(a.weights == b.weights);
  CHECK(a.losses == b.losses);
  CHECK(a.losses.back() < 0.5 * a.losses.front());
}
