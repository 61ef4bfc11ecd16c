#include "vf/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorKind::Config, msg); };
  if (vocab_size < 2) fail("vocab_size must be at least 2");
  if (d_model == 0 || n_heads == 0) fail("d_model and n_heads must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embeddings");
  if (n_layers < 1) fail("n_layers must be at least 1");
  if (max_seq < 1) fail("max_seq must be positive");
  if (!(norm_eps > 0) || !(rope_base > 0)) fail("norm_eps and rope_base must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["max_seq"] = max_seq;
  j["tied"] = tied;
  j["rope_base"] = rope_base;
  j["norm_eps"] = norm_eps;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.max_seq = j.at("max_seq").get<std::size_t>();
    c.tied = j.value("tied", false);
    c.rope_base = j.value("rope_base", 10000.0);
    c.norm_eps = j.value("norm_eps", 1e-5);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

template <typename T>
Weights<T> Weights<T>::blank(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t V = cfg.vocab_size, d = cfg.d_model, f = cfg.d_ff();
  Weights w;
  w.config = cfg;
  w.in_emb = Tensor<T>({V, d});
  if (!cfg.tied) w.untied_out = Tensor<T>({V, d});
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.attn_norm = Tensor<T>({d});
    l.attn_norm.fill(T(1));
    l.wq = Tensor<T>({d, d});
    l.wk = Tensor<T>({d, d});
    l.wv = Tensor<T>({d, d});
    l.wo = Tensor<T>({d, d});
    l.mlp_norm = Tensor<T>({d});
    l.mlp_norm.fill(T(1));
    l.w_up = Tensor<T>({d, f});
    l.w_down = Tensor<T>({f, d});
  }
  w.final_norm = Tensor<T>({d});
  w.final_norm.fill(T(1));
  return w;
}

template <typename T>
Weights<T> Weights<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
  Weights w = blank(cfg);
  const double d = static_cast<double>(cfg.d_model);
  const double depth = std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
  for (auto& [name, t] : w.named()) {
    if (t->rank() == 1) continue;  // norm gains stay at 1
    double stddev = 1.0 / std::sqrt(static_cast<double>(t->rows()));
    if (name == "in_emb") stddev = 1.0;
    if (name == "out_emb") stddev = 1.0 / std::sqrt(d);
    if (name.ends_with(".wo") || name.ends_with(".w_down")) stddev /= depth;
    Rng rng(derive_seed(seed, "init:" + name));
    for (auto& v : t->values()) v = static_cast<T>(rng.normal() * stddev);
  }
  return w;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Weights<T>::named() {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  out.emplace_back("in_emb", &in_emb);
  if (!config.tied) out.emplace_back("out_emb", &untied_out);
  for (std::size_t l = 0; l < layers.size(); ++l)
    layers[l].visit([&](const char* name, Tensor<T>& t) {
      out.emplace_back("layers." + std::to_string(l) + "." + name, &t);
    });
  out.emplace_back("final_norm", &final_norm);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const Tensor<T>*>> Weights<T>::named() const {
  auto mut = const_cast<Weights*>(this)->named();
  return {mut.begin(), mut.end()};
}

GradRequest GradRequest::all_weights(const ModelConfig& cfg) {
  GradRequest r;
  r.all_input = true;
  r.output_table = true;
  r.final_norm = true;
  for (std::size_t l = 0; l < cfg.n_layers; ++l) r.layers.push_back(l);
  return r;
}

const char* to_string(OutputMode m) noexcept {
  switch (m) {
    case OutputMode::Exclude: return "exclude";
    case OutputMode::Zeros: return "zeros";
    case OutputMode::Learned: return "learned";
  }
  return "?";
}

OutputMode output_mode_from_string(const std::string& s) {
  if (s == "exclude") return OutputMode::Exclude;
  if (s == "zeros") return OutputMode::Zeros;
  if (s == "learned") return OutputMode::Learned;
  throw Error(ErrorKind::Usage, "unknown output mode '" + s + "' (exclude|zeros|learned)");
}

namespace {

// Rotates each (2m, 2m+1) channel pair of every head by pos·base^(−2m/dh).
// sign = −1 applies the inverse (transpose) rotation.
template <typename T>
void rope_inplace(Tensor<T>& x, const ModelConfig& cfg, double sign) {
  const std::size_t n = x.rows(), H = cfg.n_heads, dh = cfg.head_dim(), half = dh / 2;
  std::vector<T> cs(half), sn(half);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t m = 0; m < half; ++m) {
      const double theta =
          static_cast<double>(p) * std::pow(cfg.rope_base, -2.0 * static_cast<double>(m) / static_cast<double>(dh));
      cs[m] = static_cast<T>(std::cos(theta));
      sn[m] = static_cast<T>(sign * std::sin(theta));
    }
    T* row = x.data() + p * x.cols();
    for (std::size_t h = 0; h < H; ++h) {
      T* hp = row + h * dh;
      for (std::size_t m = 0; m < half; ++m) {
        const T a = hp[2 * m], b = hp[2 * m + 1];
        hp[2 * m] = a * cs[m] - b * sn[m];
        hp[2 * m + 1] = a * sn[m] + b * cs[m];
      }
    }
  }
}

// Causal multi-head attention over already-rotated q, k. probs is H×n×n with
// zeros above the diagonal.
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const ModelConfig& cfg, Tensor<T>* probs_out) {
  const std::size_t n = q.rows(), d = q.cols(), H = cfg.n_heads, dh = cfg.head_dim();
  const T scale = T(1) / std::sqrt(T(dh));
  Tensor<T> out({n, d});
  Tensor<T> probs({H, n, n});
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      T* p = probs.data() + (h * n + i) * n;
      const T* qi = q.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* kj = k.data() + j * d + off;
        T s = 0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        p[j] = s * scale;
      }
      if (!all_finite(std::span<const T>(p, i + 1)))
        throw Error(ErrorKind::Numeric, "non-finite attention score");
      softmax_inplace(std::span<T>(p, i + 1));
      T* oi = out.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const T pj = p[j];
        const T* vj = v.data() + j * d + off;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += pj * vj[c];
      }
    }
  }
  if (probs_out) *probs_out = std::move(probs);
  return out;
}

template <typename T>
Tensor<T> block_forward(const LayerWeights<T>& lw, const Tensor<T>& x, const ModelConfig& cfg,
                        LayerCache<T>* cache) {
  const T eps = static_cast<T>(cfg.norm_eps);
  Tensor<T> a = rmsnorm(x, lw.attn_norm, eps);
  Tensor<T> q = matmul(a, lw.wq);
  Tensor<T> k = matmul(a, lw.wk);
  Tensor<T> v = matmul(a, lw.wv);
  rope_inplace(q, cfg, 1.0);
  rope_inplace(k, cfg, 1.0);
  Tensor<T> probs;
  Tensor<T> att = attention(q, k, v, cfg, cache ? &probs : nullptr);
  Tensor<T> x2 = matmul(att, lw.wo);
  add_inplace(x2, x);
  Tensor<T> b = rmsnorm(x2, lw.mlp_norm, eps);
  Tensor<T> u = matmul(b, lw.w_up);
  Tensor<T> g = gelu(u);
  Tensor<T> x3 = matmul(g, lw.w_down);
  add_inplace(x3, x2);
  if (cache) {
    cache->x = x;
    cache->a = std::move(a);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->attn = std::move(att);
    cache->x2 = std::move(x2);
    cache->b = std::move(b);
    cache->u = std::move(u);
    cache->g = std::move(g);
  }
  return x3;
}

// Returns the gradient on the block input; fills `grads` when non-null.
template <typename T>
Tensor<T> block_backward(const LayerWeights<T>& lw, const LayerCache<T>& c, const Tensor<T>& dx3,
                         const ModelConfig& cfg, LayerWeights<T>* grads) {
  const T eps = static_cast<T>(cfg.norm_eps);
  const std::size_t n = dx3.rows(), d = cfg.d_model, H = cfg.n_heads, dh = cfg.head_dim();

  Tensor<T> dg = matmul_nt(dx3, lw.w_down);
  Tensor<T> du = gelu_backward(c.u, dg);
  Tensor<T> db = matmul_nt(du, lw.w_up);
  auto rb = rmsnorm_backward(c.x2, lw.mlp_norm, db, eps, grads != nullptr);
  Tensor<T> dx2 = std::move(rb.dx);
  add_inplace(dx2, dx3);
  if (grads) {
    grads->w_down = matmul_tn(c.g, dx3);
    grads->w_up = matmul_tn(c.b, du);
    grads->mlp_norm = std::move(rb.dgain);
  }

  Tensor<T> datt = matmul_nt(dx2, lw.wo);
  if (grads) grads->wo = matmul_tn(c.attn, dx2);

  Tensor<T> dq({n, d}), dk({n, d}), dv({n, d});
  const T scale = T(1) / std::sqrt(T(dh));
  std::vector<T> dp(n);
  for (std::size_t h = 0; h < H; ++h) {
    const std::size_t off = h * dh;
    for (std::size_t i = 0; i < n; ++i) {
      const T* p = c.probs.data() + (h * n + i) * n;
      const T* doi = datt.data() + i * d + off;
      T dotp = 0;
      for (std::size_t j = 0; j <= i; ++j) {
        const T* vj = c.v.data() + j * d + off;
        T s = 0;
        for (std::size_t e = 0; e < dh; ++e) s += doi[e] * vj[e];
        dp[j] = s;
        dotp += p[j] * s;
        T* dvj = dv.data() + j * d + off;
        for (std::size_t e = 0; e < dh; ++e) dvj[e] += p[j] * doi[e];
      }
      const T* qi = c.q.data() + i * d + off;
      T* dqi = dq.data() + i * d + off;
      for (std::size_t j = 0; j <= i; ++j) {
        const T ds = p[j] * (dp[j] - dotp) * scale;
        const T* kj = c.k.data() + j * d + off;
        T* dkj = dk.data() + j * d + off;
        for (std::size_t e = 0; e < dh; ++e) {
          dqi[e] += ds * kj[e];
          dkj[e] += ds * qi[e];
        }
      }
    }
  }
  rope_inplace(dq, cfg, -1.0);
  rope_inplace(dk, cfg, -1.0);

  Tensor<T> da = matmul_nt(dq, lw.wq);
  add_inplace(da, matmul_nt(dk, lw.wk));
  add_inplace(da, matmul_nt(dv, lw.wv));
  if (grads) {
    grads->wq = matmul_tn(c.a, dq);
    grads->wk = matmul_tn(c.a, dk);
    grads->wv = matmul_tn(c.a, dv);
  }
  auto ra = rmsnorm_backward(c.x, lw.attn_norm, da, eps, grads != nullptr);
  if (grads) grads->attn_norm = std::move(ra.dgain);
  add_inplace(ra.dx, dx2);
  return std::move(ra.dx);
}

template <typename T>
Tensor<T> logits_of(const Tensor<T>& normed, const Tensor<T>& out_emb, const Tensor<T>* extra) {
  Tensor<T> base = matmul_nt(normed, out_emb);
  if (!extra || extra->rows() == 0) return base;
  const std::size_t n = normed.rows(), V = out_emb.rows(), X = extra->rows();
  Tensor<T> ex = matmul_nt(normed, *extra);
  Tensor<T> all({n, V + X});
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(base.data() + i * V, V, all.data() + i * (V + X));
    std::copy_n(ex.data() + i * X, X, all.data() + i * (V + X) + V);
  }
  return all;
}

}  // namespace

template <typename T>
ForwardTrace<T> forward(const Weights<T>& w, std::span<const TokenId> ids,
                        const ForwardOptions& opts, const AddedRows<T>& added) {
  const ModelConfig& cfg = w.config;
  const std::size_t L = cfg.n_layers, V = cfg.vocab_size, d = cfg.d_model;
  const std::size_t tap = opts.tap_layer == kFullDepth ? L : opts.tap_layer;
  if (tap < 1 || tap > L)
    throw Error(ErrorKind::Usage, "tap layer " + std::to_string(tap) + " outside [1, " +
                                      std::to_string(L) + "]");
  if (ids.empty()) throw Error(ErrorKind::Length, "empty input sequence");
  if (ids.size() > cfg.max_seq)
    throw Error(ErrorKind::Length, "sequence of " + std::to_string(ids.size()) +
                                       " tokens exceeds max_seq " + std::to_string(cfg.max_seq));
  if (added.in && added.in->cols() != d)
    throw Error(ErrorKind::Dimension, "added input rows must have d columns");
  if (added.out && added.out->cols() != d)
    throw Error(ErrorKind::Dimension, "added output rows must have d columns");

  ForwardTrace<T> tr;
  tr.ids.assign(ids.begin(), ids.end());
  tr.tap_layer = tap;
  tr.pre_norm_tap = opts.pre_norm_tap;
  tr.n_added_in = added.n_in();
  tr.n_added_out = added.n_out();
  tr.has_cache = opts.keep_cache;

  const std::size_t n = ids.size();
  Tensor<T> h0({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const TokenId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= V + tr.n_added_in)
      throw Error(ErrorKind::Id, "token id " + std::to_string(id) + " outside vocabulary of " +
                                     std::to_string(V + tr.n_added_in));
    const auto src = static_cast<std::size_t>(id) < V
                         ? w.in_emb.row(static_cast<std::size_t>(id))
                         : added.in->row(static_cast<std::size_t>(id) - V);
    std::copy(src.begin(), src.end(), h0.row(i).begin());
  }
  tr.hidden.reserve(tap + 1);
  tr.hidden.push_back(std::move(h0));
  if (opts.keep_cache) tr.cache.resize(tap);

  for (std::size_t l = 0; l < tap; ++l) {
    Tensor<T> next = block_forward(w.layers[l], tr.hidden.back(), cfg,
                                   opts.keep_cache ? &tr.cache[l] : nullptr);
    tr.hidden.push_back(std::move(next));
  }

  if (tap == L) {
    Tensor<T> normed = rmsnorm(tr.hidden.back(), w.final_norm, static_cast<T>(cfg.norm_eps));
    if (opts.need_logits) tr.logits = logits_of(normed, w.out_emb(), added.out);
    if (opts.keep_cache) {
      tr.final_resid = tr.hidden.back();
      tr.final_normed = normed;
    }
    if (!opts.pre_norm_tap) tr.hidden.back() = std::move(normed);
  }
  return tr;
}

template <typename T>
GradBundle<T> backward(const Weights<T>& w, const ForwardTrace<T>& tr, const Upstream<T>& up,
                       const GradRequest& req, const AddedRows<T>& added) {
  if (!tr.has_cache) throw Error(ErrorKind::Cache, "backward needs a trace built with keep_cache");
  const ModelConfig& cfg = w.config;
  const std::size_t L = cfg.n_layers, V = cfg.vocab_size, d = cfg.d_model, n = tr.ids.size();
  if (added.n_in() != tr.n_added_in || added.n_out() != tr.n_added_out)
    throw Error(ErrorKind::Dimension, "added rows differ from those used in the forward pass");
  if (up.d_tap && (up.d_tap->rows() != n || up.d_tap->cols() != d))
    throw Error(ErrorKind::Dimension, "upstream gradient on the tap must be n×d");

  GradBundle<T> gb;
  const std::set<std::size_t> want_layers(req.layers.begin(), req.layers.end());
  for (auto l : want_layers)
    if (l >= L) throw Error(ErrorKind::Usage, "gradient requested for missing layer " + std::to_string(l));

  const std::size_t inject = up.layer == kFullDepth ? tr.tap_layer : up.layer;
  if (up.d_tap && (inject > tr.tap_layer))
    throw Error(ErrorKind::Usage, "upstream layer lies above the trace's tap");
  // Upstream on H^(tap) is handled below; upstream on a lower H^(k) joins the
  // running gradient once the reverse pass reaches block k.
  const Tensor<T>* d_top = inject == tr.tap_layer ? up.d_tap : nullptr;
  const Tensor<T>* d_low = inject == tr.tap_layer ? nullptr : up.d_tap;

  Tensor<T> g({n, d});
  if (tr.tap_layer == L) {
    Tensor<T> dnormed({n, d});
    bool through_norm = false;
    if (up.d_logits) {
      const std::size_t X = tr.n_added_out, C = V + X;
      const Tensor<T>& dl = *up.d_logits;
      if (dl.rows() != n || dl.cols() != C)
        throw Error(ErrorKind::Dimension, "upstream logit gradient has the wrong shape");
      const Tensor<T>& E = w.out_emb();
      if (req.output_table) gb.out_emb = Tensor<T>({V, d});
      if (req.added_output && X) gb.added_out = Tensor<T>({X, d});
      for (std::size_t i = 0; i < n; ++i) {
        T* dn = dnormed.data() + i * d;
        const T* hn = tr.final_normed.data() + i * d;
        for (std::size_t c = 0; c < C; ++c) {
          const T gic = dl(i, c);
          if (gic == T(0)) continue;
          const T* e = c < V ? E.data() + c * d : added.out->data() + (c - V) * d;
          for (std::size_t k = 0; k < d; ++k) dn[k] += gic * e[k];
          T* acc = nullptr;
          if (c < V && req.output_table) acc = gb.out_emb.data() + c * d;
          if (c >= V && req.added_output) acc = gb.added_out.data() + (c - V) * d;
          if (acc)
            for (std::size_t k = 0; k < d; ++k) acc[k] += gic * hn[k];
        }
      }
      through_norm = true;
    }
    if (d_top) {
      if (tr.pre_norm_tap) {
        add_inplace(g, *d_top);
      } else {
        add_inplace(dnormed, *d_top);
        through_norm = true;
      }
    }
    if (through_norm) {
      auto r = rmsnorm_backward(tr.final_resid, w.final_norm, dnormed,
                                static_cast<T>(cfg.norm_eps), req.final_norm);
      add_inplace(g, r.dx);
      if (req.final_norm) gb.final_norm = std::move(r.dgain);
    } else if (req.final_norm) {
      gb.final_norm = Tensor<T>({d});
    }
  } else {
    if (up.d_logits) throw Error(ErrorKind::Usage, "logit gradient given for a truncated trace");
    if (d_top) g = *d_top;
  }

  for (std::size_t l = tr.tap_layer; l-- > 0;) {
    if (d_low && l + 1 == inject) add_inplace(g, *d_low);
    const bool want = want_layers.count(l) > 0;
    LayerWeights<T> lg;
    g = block_backward(w.layers[l], tr.cache[l], g, cfg, want ? &lg : nullptr);
    if (want) gb.layers.emplace(l, std::move(lg));
  }
  if (d_low && inject == 0) add_inplace(g, *d_low);
  // Layers above the tap were not executed: their gradient is zero.
  for (auto l : want_layers)
    if (!gb.layers.count(l)) {
      LayerWeights<T> z = w.layers[l];
      z.visit([](const char*, Tensor<T>& t) { t.fill(T(0)); });
      gb.layers.emplace(l, std::move(z));
    }

  if (req.all_input) gb.in_emb = Tensor<T>({V, d});
  if (req.added_input && tr.n_added_in) gb.added_in = Tensor<T>({tr.n_added_in, d});
  for (TokenId id : req.input_rows) {
    if (id < 0 || static_cast<std::size_t>(id) >= V)
      throw Error(ErrorKind::Id, "gradient requested for row " + std::to_string(id) +
                                     " outside the original vocabulary");
    gb.rows.emplace(id, std::vector<T>(d, T(0)));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const auto id = static_cast<std::size_t>(tr.ids[i]);
    const T* gi = g.data() + i * d;
    auto add = [&](T* dst) {
      for (std::size_t k = 0; k < d; ++k) dst[k] += gi[k];
    };
    if (id >= V) {
      if (req.added_input) add(gb.added_in.data() + (id - V) * d);
      continue;
    }
    if (req.all_input) add(gb.in_emb.data() + id * d);
    if (auto it = gb.rows.find(static_cast<TokenId>(id)); it != gb.rows.end()) add(it->second.data());
  }
  return gb;
}

template <typename T>
std::vector<TokenId> generate(const Weights<T>& w, std::span<const TokenId> prompt,
                              std::size_t max_new, const Sampling& sampling, OutputMode mode,
                              const AddedRows<T>& added) {
  if (prompt.empty()) throw Error(ErrorKind::Length, "generation needs a non-empty prompt");
  const std::size_t V = w.config.vocab_size, d = w.config.d_model;
  Tensor<T> zeros;
  AddedRows<T> rows{added.in, nullptr};
  if (mode == OutputMode::Zeros && added.n_in()) {
    zeros = Tensor<T>({added.n_in(), d});
    rows.out = &zeros;
  } else if (mode == OutputMode::Learned) {
    if (added.n_in() && !added.out)
      throw Error(ErrorKind::Usage, "learned output mode needs output rows");
    rows.out = added.out;
  }

  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  Rng rng(sampling.seed);
  ForwardOptions fo;
  fo.need_logits = true;
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::size_t start = seq.size() > w.config.max_seq ? seq.size() - w.config.max_seq : 0;
    auto tr = forward(w, std::span<const TokenId>(seq).subspan(start), fo, rows);
    const Tensor<T>& lg = *tr.logits;
    const auto last = lg.row(lg.rows() - 1);
    const std::size_t C = mode == OutputMode::Exclude ? V : last.size();
    TokenId next = 0;
    if (sampling.temperature <= 0) {
      T best = last[0];
      for (std::size_t c = 1; c < C; ++c)
        if (last[c] > best) {
          best = last[c];
          next = static_cast<TokenId>(c);
        }
    } else {
      std::vector<double> p(C);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) {
        p[c] = static_cast<double>(last[c]) / sampling.temperature;
        mx = std::max(mx, p[c]);
      }
      double sum = 0;
      for (auto& v : p) sum += (v = std::exp(v - mx));
      double u = rng.uniform() * sum;
      next = static_cast<TokenId>(C - 1);
      for (std::size_t c = 0; c < C; ++c) {
        if (u < p[c]) {
          next = static_cast<TokenId>(c);
          break;
        }
        u -= p[c];
      }
    }
    seq.push_back(next);
  }
  return seq;
}

#define VF_INSTANTIATE(T)                                                                    \
  template struct Weights<T>;                                                                \
  template ForwardTrace<T> forward(const Weights<T>&, std::span<const TokenId>,              \
                                   const ForwardOptions&, const AddedRows<T>&);              \
  template GradBundle<T> backward(const Weights<T>&, const ForwardTrace<T>&,                 \
                                  const Upstream<T>&, const GradRequest&, const AddedRows<T>&); \
  template std::vector<TokenId> generate(const Weights<T>&, std::span<const TokenId>,        \
                                         std::size_t, const Sampling&, OutputMode,          \
                                         const AddedRows<T>&);

VF_INSTANTIATE(float)
VF_INSTANTIATE(double)

}  // namespace vf
