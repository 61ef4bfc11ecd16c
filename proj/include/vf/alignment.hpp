#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "vf/tokenizer.hpp"

namespace vf {

// (i, j): position i of the extended sequence s* holds the same base token,
// at the same byte offset, as position j of the original sequence s.
struct AlignPair {
  std::size_t i;
  std::size_t j;
  bool operator==(const AlignPair&) const = default;
  auto operator<=>(const AlignPair&) const = default;
};

// One added-token occurrence: its position in s* and the half-open range of
// original tokens [span_begin, span_end) covering the same bytes.
struct Occurrence {
  std::size_t position;
  TokenId id;
  std::size_t span_begin;
  std::size_t span_end;
  bool operator==(const Occurrence&) const = default;
};

struct AlignmentMap {
  std::vector<AlignPair> pairs;  // increasing in both i and j
  std::vector<Occurrence> occurrences;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }

  // Debug dump: {text, pairs:[[i,j]...], spans:[{position,id,string,subtokens:[b,e]}]}.
  nlohmann::ordered_json to_json(const ExtendedVocab& vocab, std::string_view text) const;
};

struct AlignOptions {
  // Also pair each occurrence with the last original token of its span.
  bool supervise_span_end = false;
};

// Walks both sequences by byte offset. A position of s* enters the map only if
// it holds a base token (not an added one) identical in id and byte range to a
// token of s, and comes after an added-token occurrence, so that it attends to
// a new embedding. Alignment error if the two sequences decode differently.
AlignmentMap align(std::span<const TokenId> s_tau, std::span<const TokenId> s_star,
                   const ExtendedVocab& vocab, const AlignOptions& opts = {});

}  // namespace vf
