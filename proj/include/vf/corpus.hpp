#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vf/matcher.hpp"
#include "vf/model.hpp"
#include "vf/tokenizer.hpp"

namespace vf {

enum class Provenance { Retrieved, Generated };

const char* to_string(Provenance p) noexcept;

// A short window of text containing one occurrence of a target string.
// Invariant: text.substr(span_begin, span_end - span_begin) == target.
struct Snippet {
  std::string target;
  std::string text;
  std::size_t span_begin = 0;
  std::size_t span_end = 0;
  Provenance provenance = Provenance::Retrieved;
  std::optional<std::size_t> doc_id;

  bool operator==(const Snippet&) const = default;
};

// Snippets grouped by target string, at most `cap` per target. Targets with
// fewer than `cap` snippets available are listed in `deficits` with the count
// that was found.
struct SnippetSet {
  std::size_t cap = 25;
  std::map<std::string, std::vector<Snippet>> by_target;
  std::map<std::string, std::size_t> deficits;

  // Returns false (and drops the snippet) once the target is at its cap.
  bool add(Snippet s);
  std::size_t total() const;
  std::vector<Snippet> flatten() const;

  bool operator==(const SnippetSet&) const = default;
};

// One snippet per line: {target, text, span:[begin,end], provenance, doc_id}.
void write_snippets_jsonl(const SnippetSet& set, const std::filesystem::path& path);
SnippetSet read_snippets_jsonl(const std::filesystem::path& path, std::size_t cap = 25);

// Plain text (one document per line) or JSONL with a "text" field; JSONL is
// chosen by a .jsonl extension.
std::vector<std::string> read_corpus(const std::filesystem::path& path);

struct RetrievalOptions {
  std::size_t n_per_target = 25;
  std::size_t window_tokens = 50;
  std::uint64_t seed = 0;
};

// Scans documents once with an Aho-Corasick matcher over `targets`, keeping
// hits whose start and end fall on pre-token boundaries (the only places an
// added token can be matched). Each target keeps a uniform reservoir sample
// (algorithm R) of its hits, drawing from
// Rng(derive_seed(seed, "retrieve:" + target)) once per hit beyond the cap.
// Every sampled hit becomes a window of at most window_tokens base tokens
// with the target near the middle and at least one token of left context
// unless the hit starts its document. Snippets are ordered by (doc, offset).
SnippetSet retrieve_snippets(const std::vector<std::string>& documents,
                             const std::vector<std::string>& targets, const Vocab& vocab,
                             const RetrievalOptions& opts = {});

// Token window around [begin, end) in `doc`, re-tokenized to at most
// window_tokens tokens. Returns nullopt if the target cannot be kept intact.
std::optional<Snippet> make_window(const std::string& doc, std::size_t begin, std::size_t end,
                                   const Vocab& vocab, std::size_t window_tokens);

// Per-target split into train and held-out parts: the last
// ceil(fraction * n) snippets of each shuffled target list are held out.
std::pair<SnippetSet, SnippetSet> split_snippets(const SnippetSet& set, double heldout_fraction,
                                                 std::uint64_t seed);

struct GenerationOptions {
  std::size_t n = 25;
  std::size_t length_tokens = 50;
  double temperature = 1.0;  // 0 is greedy
  std::uint64_t seed = 0;
};

// Samples n continuations of [BOS] + base encoding of the target (with a
// leading space prepended unless it already has one). Sample k draws from
// derive_seed(seed, "generate:" + target + ":" + k). The target always sits
// right after the prompt's leading space, so span_begin is 0 or 1.
template <typename T>
SnippetSet generate_snippets(const Weights<T>& w, const std::string& target,
                             const ExtendedVocab& vocab, const GenerationOptions& opts = {});

}  // namespace vf
