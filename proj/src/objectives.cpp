#include "vf/objectives.hpp"

#include <cmath>
#include <iostream>

#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

// ---------------------------------------------------------------------------
// NewTokenTable

NewTokenTable NewTokenTable::blank(const ExtendedVocab& vocab, std::size_t d, OutputMode mode) {
  NewTokenTable t;
  t.output_mode = mode;
  for (const auto& a : vocab.added()) t.tokens.push_back({a.text, a.id, a.subtokens, "zeros", 0});
  t.in_emb = Tensor<float>({t.tokens.size(), d});
  t.out_emb = Tensor<float>({t.tokens.size(), d});
  return t;
}

void NewTokenTable::clamp() {
  if (!max_norm) return;
  for (std::size_t r = 0; r < in_emb.rows(); ++r) {
    auto row = in_emb.row(r);
    double sq = 0;
    for (float v : row) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (norm > *max_norm) {
      // Round toward the ball: a plain rescale can land a hair outside in f32.
      const double s = *max_norm / norm * (1.0 - 1e-6);
      for (float& v : row) v = static_cast<float>(v * s);
    }
  }
}

void NewTokenTable::validate() const {
  check_finite(in_emb, "new-token input rows");
  check_finite(out_emb, "new-token output rows");
  if (max_norm)
    for (std::size_t r = 0; r < in_emb.rows(); ++r)
      if (l2_norm(in_emb.row(r)) > *max_norm)
        throw Error(ErrorKind::Training, "row " + std::to_string(r) + " exceeds the norm clamp");
  if (output_mode != OutputMode::Learned)
    for (float v : out_emb.values())
      if (v != 0.0f) throw Error(ErrorKind::Training, "output rows must be zero outside learned mode");
}

void NewTokenTable::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json meta;
  meta["config"] = {{"d_model", dim()}, {"output_mode", to_string(output_mode)}};
  if (max_norm) meta["config"]["max_norm"] = *max_norm;
  auto toks = nlohmann::ordered_json::array();
  for (const auto& e : tokens) {
    nlohmann::ordered_json j;
    j["string"] = to_hex(e.text);
    j["id"] = e.id;
    j["subtokens"] = e.subtokens;
    j["init"] = e.init;
    j["steps"] = e.steps;
    toks.push_back(std::move(j));
  }
  meta["tokens"] = std::move(toks);
  write_container(path, std::move(meta), {{"added.in_emb", &in_emb}, {"added.out_emb", &out_emb}});
}

NewTokenTable NewTokenTable::load(const std::filesystem::path& path) {
  Container c = read_container(path);
  NewTokenTable t;
  try {
    const auto& cfg = c.meta.at("config");
    t.output_mode = output_mode_from_string(cfg.at("output_mode").get<std::string>());
    if (cfg.contains("max_norm")) t.max_norm = cfg.at("max_norm").get<double>();
    for (const auto& j : c.meta.at("tokens"))
      t.tokens.push_back({from_hex(j.at("string").get<std::string>()), j.at("id").get<TokenId>(),
                          j.at("subtokens").get<std::vector<TokenId>>(),
                          j.at("init").get<std::string>(), j.at("steps").get<std::size_t>()});
    t.in_emb = std::move(c.tensors.at("added.in_emb"));
    t.out_emb = std::move(c.tensors.at("added.out_emb"));
    const std::size_t d = cfg.at("d_model").get<std::size_t>();
    if (t.in_emb.rows() != t.tokens.size() || t.in_emb.cols() != d ||
        t.out_emb.shape() != t.in_emb.shape())
      throw Error(ErrorKind::Format, path.string() + ": table shapes disagree with metadata");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, path.string() + ": " + e.what());
  } catch (const std::out_of_range&) {
    throw Error(ErrorKind::Format, path.string() + ": missing table tensor");
  }
  return t;
}

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
Tensor<T> init_random(const Tensor<T>& in_emb, std::size_t count, std::uint64_t seed) {
  const std::size_t V = in_emb.rows(), d = in_emb.cols();
  if (V < 2) throw Error(ErrorKind::Degenerate, "random init needs at least two original rows");
  std::vector<double> mu(d, 0.0), sigma(d, 0.0);
  for (std::size_t r = 0; r < V; ++r)
    for (std::size_t c = 0; c < d; ++c) mu[c] += in_emb(r, c);
  for (auto& m : mu) m /= static_cast<double>(V);
  for (std::size_t r = 0; r < V; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      const double dv = in_emb(r, c) - mu[c];
      sigma[c] += dv * dv;
    }
  for (auto& s : sigma) s = std::sqrt(s / static_cast<double>(V));

  Tensor<T> out({count, d});
  Rng rng(derive_seed(seed, "init:random"));
  for (std::size_t r = 0; r < count; ++r)
    for (std::size_t c = 0; c < d; ++c) out(r, c) = static_cast<T>(mu[c] + sigma[c] * rng.normal());
  return out;
}

template <typename T>
std::vector<T> init_subtoken_mean(const Tensor<T>& in_emb, std::span<const TokenId> subtokens) {
  if (subtokens.empty()) throw Error(ErrorKind::Degenerate, "subtoken mean of an empty sequence");
  const std::size_t d = in_emb.cols();
  std::vector<double> acc(d, 0.0);
  for (TokenId id : subtokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= in_emb.rows())
      throw Error(ErrorKind::Id, "subtoken id " + std::to_string(id) + " outside the table");
    const auto row = in_emb.row(static_cast<std::size_t>(id));
    for (std::size_t c = 0; c < d; ++c) acc[c] += row[c];
  }
  std::vector<T> out(d);
  for (std::size_t c = 0; c < d; ++c)
    out[c] = static_cast<T>(acc[c] / static_cast<double>(subtokens.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

const char* to_string(ObjectiveKind k) noexcept {
  switch (k) {
    case ObjectiveKind::TD: return "td";
    case ObjectiveKind::TDLogits: return "td_logits";
    case ObjectiveKind::TDKL: return "td_kl";
    case ObjectiveKind::NTPMasked: return "ntp_masked";
    case ObjectiveKind::NTPAll: return "ntp_all";
  }
  return "?";
}

const char* to_string(Combine c) noexcept {
  switch (c) {
    case Combine::None: return "none";
    case Combine::Sum: return "sum";
    case Combine::Autoscaled: return "autoscaled";
  }
  return "?";
}

ObjectiveKind objective_from_string(const std::string& s) {
  for (auto k : {ObjectiveKind::TD, ObjectiveKind::TDLogits, ObjectiveKind::TDKL,
                 ObjectiveKind::NTPMasked, ObjectiveKind::NTPAll})
    if (s == to_string(k)) return k;
  throw Error(ErrorKind::Usage,
              "unknown objective '" + s + "' (td|td_logits|td_kl|ntp_masked|ntp_all)");
}

Combine combine_from_string(const std::string& s) {
  for (auto c : {Combine::None, Combine::Sum, Combine::Autoscaled})
    if (s == to_string(c)) return c;
  throw Error(ErrorKind::Usage, "unknown combination '" + s + "' (none|sum|autoscaled)");
}

std::size_t ObjectiveConfig::tap(std::size_t n_layers) const {
  return tap_layer == kFullDepth ? n_layers : tap_layer;
}

void ObjectiveConfig::validate(std::size_t n_layers) const {
  const std::size_t l = tap(n_layers);
  if (l < 1 || l > n_layers)
    throw Error(ErrorKind::Config, "tap layer " + std::to_string(l) + " outside [1, " +
                                       std::to_string(n_layers) + "]");
  if ((kind == ObjectiveKind::TDLogits || kind == ObjectiveKind::TDKL) && l != n_layers)
    throw Error(ErrorKind::Config, std::string(to_string(kind)) + " compares logits and needs the final layer");
  if (combine != Combine::None && is_ntp())
    throw Error(ErrorKind::Config, "combination applies to distillation objectives only");
  if (head_only && output_mode != OutputMode::Learned)
    throw Error(ErrorKind::Config, "head-only training needs learned output rows");
}

// ---------------------------------------------------------------------------
// Losses

namespace {

void require_pairs(const AlignmentMap& map) {
  if (map.empty()) throw Error(ErrorKind::Degenerate, "alignment map has no pairs");
}

template <typename T>
void require_rows(const Tensor<T>& t, std::size_t row, const char* what) {
  if (row >= t.rows())
    throw Error(ErrorKind::Dimension, std::string(what) + " has no row " + std::to_string(row));
}

// log-softmax over the first V entries, in double.
template <typename T>
std::vector<double> log_softmax(std::span<const T> z, std::size_t V) {
  double mx = -INFINITY;
  for (std::size_t c = 0; c < V; ++c) mx = std::max(mx, static_cast<double>(z[c]));
  double s = 0;
  for (std::size_t c = 0; c < V; ++c) s += std::exp(static_cast<double>(z[c]) - mx);
  const double lse = mx + std::log(s);
  std::vector<double> out(V);
  for (std::size_t c = 0; c < V; ++c) out[c] = static_cast<double>(z[c]) - lse;
  return out;
}

}  // namespace

template <typename T>
LossGrad<T> td_loss(const Tensor<T>& teacher, const Tensor<T>& student, const AlignmentMap& map) {
  require_pairs(map);
  if (teacher.cols() != student.cols())
    throw Error(ErrorKind::Dimension, "teacher and student states differ in width");
  const std::size_t d = student.cols();
  const double inv = 1.0 / static_cast<double>(map.size());
  LossGrad<T> out{0.0, Tensor<T>(student.shape())};
  for (const auto& [i, j] : map.pairs) {
    require_rows(student, i, "student states");
    require_rows(teacher, j, "teacher states");
    const T* s = student.data() + i * d;
    const T* t = teacher.data() + j * d;
    T* g = out.grad.data() + i * d;
    double sq = 0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = static_cast<double>(s[c]) - static_cast<double>(t[c]);
      sq += diff * diff;
      g[c] += static_cast<T>(2.0 * diff * inv);
    }
    out.value += sq;
  }
  out.value *= inv;
  return out;
}

template <typename T>
LossGrad<T> logit_mse_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                           const AlignmentMap& map) {
  require_pairs(map);
  if (teacher_logits.empty() || student_logits.empty())
    throw Error(ErrorKind::Config, "logit objectives need logits from the final layer");
  const std::size_t V = teacher_logits.cols(), C = student_logits.cols();
  if (C < V) throw Error(ErrorKind::Dimension, "student logits narrower than the teacher's");
  const double inv = 1.0 / static_cast<double>(map.size());
  LossGrad<T> out{0.0, Tensor<T>(student_logits.shape())};
  for (const auto& [i, j] : map.pairs) {
    require_rows(student_logits, i, "student logits");
    require_rows(teacher_logits, j, "teacher logits");
    const T* s = student_logits.data() + i * C;
    const T* t = teacher_logits.data() + j * V;
    T* g = out.grad.data() + i * C;
    for (std::size_t c = 0; c < V; ++c) {
      const double diff = static_cast<double>(s[c]) - static_cast<double>(t[c]);
      out.value += diff * diff;
      g[c] += static_cast<T>(2.0 * diff * inv);
    }
  }
  out.value *= inv;
  return out;
}

template <typename T>
LossGrad<T> kl_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                    const AlignmentMap& map) {
  require_pairs(map);
  if (teacher_logits.empty() || student_logits.empty())
    throw Error(ErrorKind::Config, "logit objectives need logits from the final layer");
  const std::size_t V = teacher_logits.cols(), C = student_logits.cols();
  if (C < V) throw Error(ErrorKind::Dimension, "student logits narrower than the teacher's");
  const double inv = 1.0 / static_cast<double>(map.size());
  LossGrad<T> out{0.0, Tensor<T>(student_logits.shape())};
  for (const auto& [i, j] : map.pairs) {
    require_rows(student_logits, i, "student logits");
    require_rows(teacher_logits, j, "teacher logits");
    const auto lt = log_softmax(teacher_logits.row(j), V);
    const auto ls = log_softmax(student_logits.row(i), V);
    double kl = 0;
    T* g = out.grad.data() + i * C;
    for (std::size_t c = 0; c < V; ++c) {
      const double pt = std::exp(lt[c]);
      kl += pt * (lt[c] - ls[c]);
      g[c] += static_cast<T>((std::exp(ls[c]) - pt) * inv);
    }
    out.value += std::max(0.0, kl);
  }
  out.value *= inv;
  return out;
}

template <typename T>
LossGrad<T> ntp_loss(const Tensor<T>& logits, std::span<const TokenId> ids) {
  const std::size_t n = ids.size(), C = logits.cols();
  if (n < 2) throw Error(ErrorKind::Length, "next-token loss needs at least two tokens");
  if (logits.rows() != n) throw Error(ErrorKind::Dimension, "logits rows differ from sequence length");
  std::vector<int> targets(n, 0);
  std::vector<bool> active(n, false);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const TokenId t = ids[i + 1];
    if (t >= 0 && static_cast<std::size_t>(t) < C) {
      targets[i] = t;
      active[i] = true;
    }
  }
  LossGrad<T> out;
  out.value = static_cast<double>(cross_entropy(logits, targets, active));
  out.grad = cross_entropy_backward(logits, targets, active);
  return out;
}

GradRequest ntp_routing(const ObjectiveConfig& cfg) {
  GradRequest r;
  const bool learned = cfg.output_mode == OutputMode::Learned;
  if (cfg.head_only) {
    r.added_output = true;
    return r;
  }
  r.added_input = true;
  r.added_output = learned;
  if (cfg.kind == ObjectiveKind::NTPAll) {
    r.all_input = true;
    r.output_table = true;
  }
  return r;
}

Combined combine(double l_td, double l_ntp, Combine mode) {
  if (!std::isfinite(l_td) || !std::isfinite(l_ntp))
    throw Error(ErrorKind::Numeric, "cannot combine non-finite losses");
  switch (mode) {
    case Combine::None: return {l_td, 0.0, false};
    case Combine::Sum: return {l_td + l_ntp, 1.0, false};
    case Combine::Autoscaled:
      if (l_ntp == 0.0) {
        std::cerr << "warning: next-token loss is zero; autoscale factor set to 1\n";
        return {l_td + l_ntp, 1.0, true};
      }
      {
        const double alpha = l_td / l_ntp;
        return {l_td + alpha * l_ntp, alpha, false};
      }
  }
  return {l_td, 0.0, false};
}

#define VF_INSTANTIATE(T)                                                                       \
  template Tensor<T> init_random(const Tensor<T>&, std::size_t, std::uint64_t);                 \
  template std::vector<T> init_subtoken_mean(const Tensor<T>&, std::span<const TokenId>);       \
  template LossGrad<T> td_loss(const Tensor<T>&, const Tensor<T>&, const AlignmentMap&);        \
  template LossGrad<T> logit_mse_loss(const Tensor<T>&, const Tensor<T>&, const AlignmentMap&); \
  template LossGrad<T> kl_loss(const Tensor<T>&, const Tensor<T>&, const AlignmentMap&);        \
  template LossGrad<T> ntp_loss(const Tensor<T>&, std::span<const TokenId>);

VF_INSTANTIATE(float)
VF_INSTANTIATE(double)

}  // namespace vf
