#pragma once

// Byte-level BPE with whitespace pre-tokenization, plus vocabulary extension
// with atomic added tokens.
//
// Pre-tokenization splits text into pieces: a single space followed by a run
// of non-whitespace bytes (" word"), a bare run of non-whitespace bytes, or a
// lone whitespace byte. Merges never cross pieces, so a word always carries
// its leading space (" palatable" -> " pal" "at" "able").

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace vf {

using TokenId = std::int32_t;

inline constexpr TokenId kByteTokenCount = 256;

struct Merge {
  TokenId left;
  TokenId right;
  bool operator==(const Merge&) const = default;
};

struct Piece {
  std::size_t begin;
  std::size_t end;
};

std::vector<Piece> split_pieces(std::string_view text);

// Token ids with the byte offset each token starts at.
struct Encoding {
  std::vector<TokenId> ids;
  std::vector<std::size_t> offsets;
};

std::string to_hex(std::string_view bytes);
std::string from_hex(std::string_view hex);

class Vocab {
 public:
  // The 256 byte tokens, then BOS and PAD, then one id per merge.
  static constexpr TokenId kBos = kByteTokenCount;
  static constexpr TokenId kPad = kByteTokenCount + 1;
  static constexpr TokenId kFirstMergeId = kByteTokenCount + 2;

  Vocab() : Vocab(std::vector<Merge>{}) {}
  explicit Vocab(std::vector<Merge> merges);

  TokenId bos() const noexcept { return kBos; }
  TokenId pad() const noexcept { return kPad; }
  std::size_t size() const noexcept { return tokens_.size(); }
  bool is_special(TokenId id) const noexcept { return id == kBos || id == kPad; }

  const std::string& token_bytes(TokenId id) const;
  const std::vector<Merge>& merges() const noexcept { return merges_; }

  // Id of the token whose bytes equal `bytes`, if one exists.
  std::optional<TokenId> find(std::string_view bytes) const;

  std::vector<TokenId> encode(std::string_view text) const;
  Encoding encode_with_offsets(std::string_view text) const;
  // BPE over a single piece.
  std::vector<TokenId> encode_piece(std::string_view piece) const;
  std::string decode(std::span<const TokenId> ids) const;

  nlohmann::json to_json() const;
  static Vocab from_json(const nlohmann::json& j);

  bool operator==(const Vocab& other) const { return merges_ == other.merges_; }

 private:
  std::vector<std::string> tokens_;
  std::vector<Merge> merges_;
  std::unordered_map<std::uint64_t, std::int32_t> rank_;
  std::unordered_map<std::string, TokenId> lookup_;
};

// Greedy BPE training over whitespace pieces. Each step merges the most
// frequent adjacent pair; ties go to the lexicographically smaller left token
// bytes, then the smaller right token bytes, then the smaller ids. Stops early
// if no pair remains.
Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_size,
                bool byte_fallback = true);

struct AddedToken {
  std::string text;
  TokenId id;
  std::vector<TokenId> subtokens;  // encoding under the base vocab
};

class ExtendedVocab {
 public:
  ExtendedVocab() = default;

  // Appends `strings` as atomic tokens with ids base.size(), base.size()+1, ...
  // `allow_single_token` admits strings that already are a single base token
  // (the duplicate-token fixture).
  static ExtendedVocab extend(const Vocab& base, std::span<const std::string> strings,
                              bool allow_single_token = false);

  const Vocab& base() const noexcept { return base_; }
  const std::vector<AddedToken>& added() const noexcept { return added_; }
  std::size_t size() const noexcept { return base_.size() + added_.size(); }
  std::size_t base_size() const noexcept { return base_.size(); }
  bool allows_single_token() const noexcept { return allow_single_token_; }

  bool is_added(TokenId id) const noexcept {
    return id >= static_cast<TokenId>(base_.size()) && id < static_cast<TokenId>(size());
  }
  const AddedToken& added_token(TokenId id) const;
  std::optional<TokenId> find_added(std::string_view text) const;

  // Added strings are matched leftmost-longest on piece boundaries before
  // BPE; unmatched pieces go through the base merges.
  std::vector<TokenId> encode(std::string_view text) const;
  Encoding encode_with_offsets(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;
  const std::string& token_bytes(TokenId id) const;

  nlohmann::json to_json() const;
  static ExtendedVocab from_json(const nlohmann::json& j);

 private:
  Vocab base_;
  std::vector<AddedToken> added_;
  std::unordered_map<std::string, TokenId> index_;
  std::size_t max_pieces_ = 0;
  bool allow_single_token_ = false;
};

// Characters that disqualify a candidate word.
inline constexpr std::string_view kExcludedChars = "\"[]{}()<>.,;:!?@#$%";

struct SelectionOptions {
  std::size_t min_eval_count = 5;
  std::size_t min_corpus_count = 25;
};

// Whole-word candidates: words (whitespace-delimited, with excluded
// characters and quotes stripped at both ends) that are not a single base
// token, contain no digit or excluded character, and reach both frequency
// thresholds. Returned in word-initial form (" word"), sorted.
std::vector<std::string> select_tokens(std::span<const std::string> corpus,
                                       std::span<const std::string> eval_texts, const Vocab& vocab,
                                       const SelectionOptions& opts = {});

}  // namespace vf
