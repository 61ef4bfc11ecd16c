#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vf/trainer.hpp"

namespace vf {

inline constexpr const char* kToolVersion = "vocabforge 0.1.0";

// A report is plain JSON with a fixed key order: kind, tool_version, seed,
// config_digest, config, rows, aggregate, notes. Aggregates are computed
// from `rows` only.
struct Report {
  std::string kind;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  nlohmann::ordered_json aggregate = nlohmann::ordered_json::object();
  std::vector<std::string> notes;

  // 16 hex digits of fnv1a64 over the compact dump of `config`.
  std::string config_digest() const;
  nlohmann::ordered_json to_json() const;
  void write(const std::filesystem::path& path) const;
  // Tab-separated rows with a header line.
  std::string to_tsv() const;
};

struct MeanStd {
  double mean = 0;
  double std = 0;  // population
};

MeanStd mean_std(std::span<const double> v);

// Rows per text: tokens under both vocabs and Δ% = (n* − n)/n (0 for empty
// texts). Aggregate: mean Δ%, totals, and Σn*²/Σn² as an attention-cost proxy.
Report compression_report(std::span<const std::string> texts, const Vocab& base,
                          const ExtendedVocab& extended);

// Rows per token: held-out td loss at `tap` and final-layer KL over mapped
// positions, each the mean over that token's snippets. Aggregate: macro mean
// and std over tokens. Tokens without a usable held-out snippet are left out
// with a note.
template <typename T>
Report fidelity_report(const Weights<T>& w, const ExtendedVocab& vocab, const NewTokenTable& table,
                       const SnippetSet& heldout, std::size_t tap);

struct RecoveryOptions {
  double heldout_fraction = 0.3;
  std::uint64_t seed = 0;
  // Starting row; a random-init row when absent.
  std::optional<std::vector<float>> start;
  double pass_ratio = 1e-3;
};

// Re-learns an existing single token as a duplicate added token with TD and
// compares against its true row. PASS iff the held-out td loss ends at or
// below pass_ratio × the held-out td loss of a random-init row.
template <typename T>
Report recovery_test(const Weights<T>& w, const Vocab& base, const std::string& token,
                     const SnippetSet& snippets, const TrainConfig& cfg,
                     const RecoveryOptions& opts = {});

inline constexpr const char* kDefinitionTemplate = "The word{token} is defined as";

// Greedy continuations of the definition prompt with the token spelled in
// base subtokens versus as the single new id. Both continuations are
// compared as base-vocab encodings of their text: shared prefix length and
// Levenshtein distance over token ids divided by the longer length.
template <typename T>
Report definition_diff(const Weights<T>& w, const ExtendedVocab& vocab, const NewTokenTable& table,
                       const std::vector<std::string>& tokens, std::size_t max_new = 24,
                       const std::string& prompt_template = kDefinitionTemplate);

std::size_t levenshtein(std::span<const TokenId> a, std::span<const TokenId> b);

}  // namespace vf
