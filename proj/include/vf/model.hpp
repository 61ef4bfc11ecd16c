#pragma once

// Decoder-only transformer: pre-norm blocks with rotary attention and a GELU
// MLP, rmsnorm everywhere, no biases.
//
//   a  = rmsnorm(x; g_attn)          b  = rmsnorm(x2; g_mlp)
//   x2 = x + Attn(a)·W_o             x3 = x2 + gelu(b·W_up)·W_down
//
// H^(0) is the embedding lookup, H^(l) the residual stream after block l, and
// H^(L) the final-norm output (the raw residual with `pre_norm_tap`).
// Logits are H^(L)·E_outᵀ.
//
// Added tokens live outside the weights: ids V, V+1, ... read their input
// rows from AddedRows::in, and AddedRows::out (when present) contributes one
// extra logit column per row.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vf/numerics.hpp"
#include "vf/tokenizer.hpp"

namespace vf {

struct ModelConfig {
  std::size_t vocab_size = 512;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq = 128;
  bool tied = false;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t d_ff() const { return 4 * d_model; }
  // Config error unless d divisible by h, head dim even, L ≥ 1, sizes > 0.
  void validate() const;

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerWeights {
  Tensor<T> attn_norm;  // d
  Tensor<T> wq, wk, wv, wo;  // d×d, input-major
  Tensor<T> mlp_norm;  // d
  Tensor<T> w_up;  // d×4d
  Tensor<T> w_down;  // 4d×d

  template <typename F>
  void visit(F&& f) {
    f("attn_norm", attn_norm);
    f("wq", wq);
    f("wk", wk);
    f("wv", wv);
    f("wo", wo);
    f("mlp_norm", mlp_norm);
    f("w_up", w_up);
    f("w_down", w_down);
  }
  template <typename F>
  void visit(F&& f) const {
    const_cast<LayerWeights*>(this)->visit(
        [&](const char* name, Tensor<T>& t) { f(name, static_cast<const Tensor<T>&>(t)); });
  }

  bool operator==(const LayerWeights&) const = default;
};

template <typename T>
struct Weights {
  ModelConfig config;
  Tensor<T> in_emb;  // V×d
  Tensor<T> untied_out;  // V×d, empty when tied
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_norm;  // d

  // The output table. For a tied model this is in_emb itself.
  Tensor<T>& out_emb() { return config.tied ? in_emb : untied_out; }
  const Tensor<T>& out_emb() const { return config.tied ? in_emb : untied_out; }

  // Zero matrices and unit norm gains.
  static Weights blank(const ModelConfig& cfg);
  // Seeded normal initialization (derive_seed(seed, "init:" + tensor name)).
  static Weights init(const ModelConfig& cfg, std::uint64_t seed);

  // Every stored tensor with its checkpoint name; out_emb is absent when tied.
  std::vector<std::pair<std::string, Tensor<T>*>> named();
  std::vector<std::pair<std::string, const Tensor<T>*>> named() const;

  template <typename U>
  Weights<U> cast() const {
    Weights<U> w;
    w.config = config;
    w.in_emb = in_emb.template cast<U>();
    w.untied_out = untied_out.template cast<U>();
    w.final_norm = final_norm.template cast<U>();
    w.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& s = layers[l];
      auto& d = w.layers[l];
      d.attn_norm = s.attn_norm.template cast<U>();
      d.wq = s.wq.template cast<U>();
      d.wk = s.wk.template cast<U>();
      d.wv = s.wv.template cast<U>();
      d.wo = s.wo.template cast<U>();
      d.mlp_norm = s.mlp_norm.template cast<U>();
      d.w_up = s.w_up.template cast<U>();
      d.w_down = s.w_down.template cast<U>();
    }
    return w;
  }

  bool operator==(const Weights&) const = default;
};

template <typename T>
struct AddedRows {
  const Tensor<T>* in = nullptr;   // n_in×d input rows for ids V..V+n_in−1
  const Tensor<T>* out = nullptr;  // n_out×d extra logit rows; null adds no columns

  std::size_t n_in() const { return in ? in->rows() : 0; }
  std::size_t n_out() const { return out ? out->rows() : 0; }
};

inline constexpr std::size_t kFullDepth = std::numeric_limits<std::size_t>::max();

struct ForwardOptions {
  std::size_t tap_layer = kFullDepth;  // 1..L; kFullDepth means L
  bool need_logits = false;            // only honored when the tap is L
  bool keep_cache = false;
  bool pre_norm_tap = false;  // H^(L) is the residual before the final norm
};

template <typename T>
struct LayerCache {
  Tensor<T> x, a, q, k, v, probs, attn, x2, b, u, g;
};

template <typename T>
struct ForwardTrace {
  std::vector<TokenId> ids;
  std::size_t tap_layer = 0;
  bool pre_norm_tap = false;
  std::vector<Tensor<T>> hidden;  // H^(0..tap)
  std::optional<Tensor<T>> logits;
  std::size_t n_added_in = 0;
  std::size_t n_added_out = 0;

  bool has_cache = false;
  std::vector<LayerCache<T>> cache;  // one per executed block
  Tensor<T> final_resid;  // residual entering the final norm
  Tensor<T> final_normed;

  const Tensor<T>& tap() const { return hidden.back(); }
};

// Id error for ids ≥ V + n_in, Length error for empty or overlong input,
// Usage error for a tap outside [1, L].
template <typename T>
ForwardTrace<T> forward(const Weights<T>& w, std::span<const TokenId> ids,
                        const ForwardOptions& opts = {}, const AddedRows<T>& added = {});

struct GradRequest {
  std::vector<TokenId> input_rows;  // original rows, subset mode
  bool all_input = false;           // full V×d input table
  bool output_table = false;        // full V×d output table (logit path only)
  bool added_input = false;
  bool added_output = false;
  std::vector<std::size_t> layers;  // block indices 0..L−1
  bool final_norm = false;

  static GradRequest all_weights(const ModelConfig& cfg);
};

// Gradients for exactly the requested targets; everything else is absent.
// On a tied model, in_emb and out_emb are the two contributions to the same
// shared table.
template <typename T>
struct GradBundle {
  std::map<TokenId, std::vector<T>> rows;
  Tensor<T> in_emb;
  Tensor<T> out_emb;
  Tensor<T> added_in;
  Tensor<T> added_out;
  std::map<std::size_t, LayerWeights<T>> layers;
  Tensor<T> final_norm;
};

// Adds every gradient present in `g` into `acc`; slots missing from `acc`
// are moved over.
template <typename T>
void accumulate(GradBundle<T>& acc, GradBundle<T>&& g) {
  auto add = [](Tensor<T>& a, Tensor<T>& b) {
    if (b.empty()) return;
    if (a.empty()) a = std::move(b);
    else add_inplace(a, b);
  };
  add(acc.in_emb, g.in_emb);
  add(acc.out_emb, g.out_emb);
  add(acc.added_in, g.added_in);
  add(acc.added_out, g.added_out);
  add(acc.final_norm, g.final_norm);
  for (auto& [id, row] : g.rows) {
    auto [it, fresh] = acc.rows.try_emplace(id, std::move(row));
    if (!fresh)
      for (std::size_t k = 0; k < row.size(); ++k) it->second[k] += row[k];
  }
  for (auto& [l, lg] : g.layers) {
    auto it = acc.layers.find(l);
    if (it == acc.layers.end()) {
      acc.layers.emplace(l, std::move(lg));
      continue;
    }
    std::vector<Tensor<T>*> dst;
    it->second.visit([&](const char*, Tensor<T>& t) { dst.push_back(&t); });
    std::size_t k = 0;
    lg.visit([&](const char*, Tensor<T>& t) { add_inplace(*dst[k++], t); });
  }
}

template <typename T>
struct Upstream {
  const Tensor<T>* d_tap = nullptr;     // gradient on H^(layer)
  const Tensor<T>* d_logits = nullptr;  // gradient on the logits (tap = L only)
  std::size_t layer = kFullDepth;       // where d_tap enters; kFullDepth is the trace's tap
};

// Reverse pass through a cached trace. `added` must be the rows used in the
// forward pass. Cache error if the trace was built without keep_cache.
template <typename T>
GradBundle<T> backward(const Weights<T>& w, const ForwardTrace<T>& trace, const Upstream<T>& up,
                       const GradRequest& req, const AddedRows<T>& added = {});

enum class OutputMode { Exclude, Zeros, Learned };

const char* to_string(OutputMode m) noexcept;
OutputMode output_mode_from_string(const std::string& s);

struct Sampling {
  double temperature = 0.0;  // 0 is greedy, ties to the lowest id
  std::uint64_t seed = 0;
};

// Autoregressive decoding without a KV cache. The context is the trailing
// max_seq tokens. Exclude never emits an added id; Zeros scores added ids
// with zero output rows; Learned requires added.out.
template <typename T>
std::vector<TokenId> generate(const Weights<T>& w, std::span<const TokenId> prompt,
                              std::size_t max_new, const Sampling& sampling = {},
                              OutputMode mode = OutputMode::Exclude,
                              const AddedRows<T>& added = {});

// Checkpoint container: "VFCK", u32 version, u64 header length, JSON header
// {…meta, tensors:[{name, shape, dtype, offset, nbytes}], crc32}, payload of
// little-endian f32. Format errors on bad magic, version, checksum, length.
void write_container(const std::filesystem::path& path, nlohmann::ordered_json meta,
                     const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors);

struct Container {
  nlohmann::json meta;  // header without "tensors" and "crc32"
  std::map<std::string, Tensor<float>> tensors;
};

Container read_container(const std::filesystem::path& path);

void save_checkpoint(const Weights<float>& w, const std::filesystem::path& path);
Weights<float> load_checkpoint(const std::filesystem::path& path);

struct PretrainOptions {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::size_t seq_len = 64;
  double lr = 3e-3;
  std::size_t warmup = 100;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::uint64_t seed = 0;
};

struct PretrainResult {
  Weights<float> weights;
  std::vector<double> losses;  // per step
};

// Next-token training of all weights on windows drawn from `stream` (token
// ids, documents joined by BOS). Training error if the loss goes non-finite.
PretrainResult pretrain_fixture(const ModelConfig& cfg, std::span<const TokenId> stream,
                                const PretrainOptions& opts,
                                const std::function<void(std::size_t, double)>& on_step = {});

}  // namespace vf
