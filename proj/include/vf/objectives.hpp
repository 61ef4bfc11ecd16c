#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vf/alignment.hpp"
#include "vf/model.hpp"
#include "vf/tokenizer.hpp"

namespace vf {

struct NewTokenEntry {
  std::string text;
  TokenId id = 0;
  std::vector<TokenId> subtokens;
  std::string init;       // starting method: "mean", "random", "zeros", ...
  std::size_t steps = 0;  // optimizer steps applied since init

  bool operator==(const NewTokenEntry&) const = default;
};

// Input (and, in learned mode, output) rows for every added token, in id
// order. out_emb is always n×d; in zeros and exclude mode it stays zero.
struct NewTokenTable {
  std::vector<NewTokenEntry> tokens;
  Tensor<float> in_emb;
  Tensor<float> out_emb;
  OutputMode output_mode = OutputMode::Zeros;
  std::optional<double> max_norm;

  std::size_t size() const noexcept { return tokens.size(); }
  std::size_t dim() const noexcept { return in_emb.cols(); }

  // Zero rows for every added token of `vocab`.
  static NewTokenTable blank(const ExtendedVocab& vocab, std::size_t d, OutputMode mode);

  // Rescales input rows whose norm exceeds max_norm; no-op when unset.
  void clamp();
  // Numeric error on a non-finite row; Training error on a clamp violation
  // or a non-zero output row outside learned mode.
  void validate() const;

  void save(const std::filesystem::path& path) const;
  static NewTokenTable load(const std::filesystem::path& path);

  bool operator==(const NewTokenTable&) const = default;
};

// Added rows as the model consumes them for a given table and precision.
template <typename T>
struct TableView {
  Tensor<T> in;
  Tensor<T> out;
  OutputMode mode = OutputMode::Zeros;

  TableView() = default;
  explicit TableView(const NewTokenTable& t)
      : in(t.in_emb.cast<T>()), out(t.out_emb.cast<T>()), mode(t.output_mode) {}

  AddedRows<T> rows() const { return {&in, mode == OutputMode::Exclude ? nullptr : &out}; }
};

// Per-channel Normal(μ_c, σ_c) over the original input rows (population σ).
// Draws come from Rng(derive_seed(seed, "init:random")) in row-major order.
template <typename T>
Tensor<T> init_random(const Tensor<T>& in_emb, std::size_t count, std::uint64_t seed);

// Arithmetic mean of the subtoken rows, accumulated in double.
template <typename T>
std::vector<T> init_subtoken_mean(const Tensor<T>& in_emb, std::span<const TokenId> subtokens);

enum class ObjectiveKind { TD, TDLogits, TDKL, NTPMasked, NTPAll };
enum class Combine { None, Sum, Autoscaled };

const char* to_string(ObjectiveKind k) noexcept;
const char* to_string(Combine c) noexcept;
ObjectiveKind objective_from_string(const std::string& s);
Combine combine_from_string(const std::string& s);

struct ObjectiveConfig {
  ObjectiveKind kind = ObjectiveKind::TD;
  std::size_t tap_layer = kFullDepth;  // kFullDepth means L
  Combine combine = Combine::None;     // adds masked NTP to a TD-family objective
  OutputMode output_mode = OutputMode::Zeros;
  bool supervise_span_end = false;
  bool weight_by_pairs = false;  // flat mean over all pairs of a batch instead of per snippet
  bool head_only = false;        // NTP updates added output rows only

  bool is_td() const {
    return kind == ObjectiveKind::TD || kind == ObjectiveKind::TDLogits ||
           kind == ObjectiveKind::TDKL;
  }
  bool is_ntp() const { return !is_td(); }
  bool needs_logits() const {
    return kind != ObjectiveKind::TD || combine != Combine::None;
  }
  // Resolved tap layer for a model with `n_layers` blocks.
  std::size_t tap(std::size_t n_layers) const;
  // Config error on a tap outside [1, L] or a logit objective below L.
  void validate(std::size_t n_layers) const;
};

template <typename T>
struct LossGrad {
  double value = 0;
  Tensor<T> grad;  // gradient with respect to the student tensor given
};

// (1/|M|) Σ_(i,j) ‖student_i − teacher_j‖² on tap states; the teacher is a
// constant. Degenerate error on an empty map.
template <typename T>
LossGrad<T> td_loss(const Tensor<T>& teacher, const Tensor<T>& student, const AlignmentMap& map);

// Same normalization over logits, on the first V channels only (V = teacher
// logit width); extra student channels get zero gradient.
template <typename T>
LossGrad<T> logit_mse_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                           const AlignmentMap& map);

// Mean over pairs of KL(teacher ‖ student), both softmaxes over the first V
// channels.
template <typename T>
LossGrad<T> kl_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits,
                    const AlignmentMap& map);

// Next-token cross-entropy of ids[1..] given logits[..n−1]. Targets without a
// logit column (added ids in exclude mode) are skipped. Degenerate error if
// nothing remains.
template <typename T>
LossGrad<T> ntp_loss(const Tensor<T>& logits, std::span<const TokenId> ids);

// Which gradients an NTP run may produce.
GradRequest ntp_routing(const ObjectiveConfig& cfg);

struct Combined {
  double value = 0;
  double alpha = 1;          // scale applied to the NTP gradient
  bool alpha_fallback = false;  // autoscaled with L_NTP = 0
};

// Sum: L_TD + L_NTP. Autoscaled: α = L_TD / L_NTP held constant, so the value
// is 2·L_TD and the gradient ∇L_TD + α∇L_NTP.
Combined combine(double l_td, double l_ntp, Combine mode);

}  // namespace vf
