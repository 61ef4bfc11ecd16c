#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vf/corpus.hpp"
#include "vf/objectives.hpp"
#include "vf/optim.hpp"

namespace vf {

struct TrainConfig {
  double lr = 1e-2;
  std::size_t batch_size = 16;
  std::size_t epochs = 1;
  double warmup_fraction = 0.5;  // linear warmup over this share of all steps, then constant
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  ObjectiveConfig objective;
  bool joint = true;  // false: each batch holds one target and updates only its row
  std::size_t n_per_target = 25;
  std::size_t window_tokens = 50;
  std::optional<double> max_norm;
  // Recompute the teacher on every cache hit and fail if it differs.
  bool verify_teacher_cache = false;

  // Config error unless lr > 0, batch ≥ 1 and warmup_fraction ∈ [0, 1].
  void validate() const;
  AdamWConfig adamw() const { return {beta1, beta2, eps, weight_decay}; }

  nlohmann::ordered_json to_json() const;
  // Missing keys keep their defaults; unknown keys are a Config error.
  static TrainConfig from_json(const nlohmann::json& j);
};

// One snippet ready for training: both tokenizations (each led by BOS) and
// their alignment. `id` is the added id the snippet was retrieved for.
struct Example {
  std::string target;
  TokenId id = 0;
  std::vector<TokenId> s_tau;
  std::vector<TokenId> s_star;
  AlignmentMap map;
};

struct PrepareOptions {
  bool isolated = false;  // other added strings stay in their base encoding
  bool supervise_span_end = false;
  bool need_pairs = true;  // drop snippets with no mapped pairs
};

// Examples in target order; snippets unusable for training are dropped with
// a note on stderr.
std::vector<Example> prepare_examples(const SnippetSet& set, const ExtendedVocab& vocab,
                                      const PrepareOptions& opts);

struct LogEntry {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::optional<double> loss_td;
  std::optional<double> loss_ntp;
  std::optional<double> alpha;
  double grad_norm = 0;

  nlohmann::ordered_json to_json() const;
};

void write_log_jsonl(const std::vector<LogEntry>& log, const std::filesystem::path& path);

template <typename T>
struct TrainResult {
  NewTokenTable table;
  std::vector<LogEntry> log;
  std::vector<std::string> untrained;  // added strings with no usable snippet
  std::optional<Weights<T>> model;     // updated base tables after NTP_all
  std::size_t teacher_forwards = 0;
};

// Optimizes the rows of `start` on `snippets` with cfg.objective. Only the
// added rows change, except under NTP_all where the base embedding tables
// move as well (returned in `model`). Input error when no snippet is usable.
template <typename T>
TrainResult<T> train_embeddings(const Weights<T>& w, const ExtendedVocab& vocab,
                                const SnippetSet& snippets, const NewTokenTable& start,
                                const TrainConfig& cfg);

// Per-snippet held-out metrics of a table: td loss at `tap`, KL at the final
// layer over mapped positions, and next-token loss over the extended
// sequence. td and kl are absent for snippets without mapped pairs.
struct SnippetMetrics {
  std::string target;
  std::optional<double> td;
  std::optional<double> kl;
  double ntp = 0;
};

template <typename T>
std::vector<SnippetMetrics> evaluate_snippets(const Weights<T>& w, const ExtendedVocab& vocab,
                                              const NewTokenTable& table, const SnippetSet& set,
                                              std::size_t tap, bool supervise_span_end = false);

struct SweepRow {
  double lr = 0;
  double heldout = 0;  // +inf if training diverged
};

struct SweepResult {
  double best_lr = 0;
  std::vector<SweepRow> rows;
};

// Trains once per grid point on `train` and scores on `heldout`: mean
// held-out td loss for TD objectives, mean held-out next-token loss for NTP
// objectives. Ties go to the smaller lr. Usage error on an empty grid.
template <typename T>
SweepResult lr_sweep(const Weights<T>& w, const ExtendedVocab& vocab, const SnippetSet& train,
                     const SnippetSet& heldout, const NewTokenTable& start, const TrainConfig& cfg,
                     const std::vector<double>& grid);

struct ContinuedConfig {
  std::size_t steps = 1000;
  std::size_t batch = 8;
  std::size_t seq_len = 64;
  double lr = 1e-3;
  std::size_t warmup = 100;
  double weight_decay = 0.0;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
};

template <typename T>
struct ContinuedResult {
  Weights<T> weights;
  NewTokenTable table;
  std::vector<double> losses;
};

// Next-token training on windows of an extended-vocab id stream, updating
// the embedding tables (base and added rows), the first and the last block;
// everything else is untouched. lr follows warmup_cosine_lr from 0 at step 0.
// Training error if the loss goes non-finite.
template <typename T>
ContinuedResult<T> continued_train(const Weights<T>& w, const NewTokenTable& table,
                                   std::span<const TokenId> stream, const ContinuedConfig& cfg);

}  // namespace vf
