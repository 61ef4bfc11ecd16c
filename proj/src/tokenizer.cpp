#include "vf/tokenizer.hpp"

#include <algorithm>
#include <climits>
#include <map>
#include <tuple>

#include "vf/error.hpp"

namespace vf {

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

std::uint64_t pair_key(TokenId l, TokenId r) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) |
         static_cast<std::uint32_t>(r);
}

std::vector<TokenId> apply_merge(const std::vector<TokenId>& ids, TokenId l, TokenId r,
                                 TokenId merged) {
  std::vector<TokenId> out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i + 1 < ids.size() && ids[i] == l && ids[i + 1] == r) {
      out.push_back(merged);
      ++i;
    } else {
      out.push_back(ids[i]);
    }
  }
  return out;
}

}  // namespace

std::vector<Piece> split_pieces(std::string_view text) {
  std::vector<Piece> pieces;
  const std::size_t n = text.size();
  std::size_t i = 0;
  while (i < n) {
    const std::size_t begin = i;
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(text[i + 1]))) {
      ++i;
      while (i < n && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    } else if (is_space(c)) {
      ++i;
    } else {
      while (i < n && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    }
    pieces.push_back({begin, i});
  }
  return pieces;
}

std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 15]);
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw Error(ErrorKind::Format, "invalid hex digit");
  };
  if (hex.size() % 2 != 0) throw Error(ErrorKind::Format, "odd-length hex string");
  std::string out(hex.size() / 2, '\0');
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<char>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
  return out;
}

// ---------------------------------------------------------------------------
// Vocab

Vocab::Vocab(std::vector<Merge> merges) : merges_(std::move(merges)) {
  tokens_.reserve(kFirstMergeId + merges_.size());
  for (int b = 0; b < kByteTokenCount; ++b) tokens_.emplace_back(1, static_cast<char>(b));
  tokens_.emplace_back();  // BOS
  tokens_.emplace_back();  // PAD
  for (std::size_t i = 0; i < merges_.size(); ++i) {
    const auto [l, r] = merges_[i];
    const auto cur = static_cast<TokenId>(tokens_.size());
    if (l < 0 || r < 0 || l >= cur || r >= cur || is_special(l) || is_special(r))
      throw Error(ErrorKind::Format, "merge " + std::to_string(i) + " references an invalid id");
    if (!rank_.emplace(pair_key(l, r), static_cast<std::int32_t>(i)).second)
      throw Error(ErrorKind::Format, "merge " + std::to_string(i) + " repeats an earlier pair");
    tokens_.push_back(tokens_[l] + tokens_[r]);
  }
  for (std::size_t id = 0; id < tokens_.size(); ++id) {
    if (is_special(static_cast<TokenId>(id))) continue;
    lookup_.emplace(tokens_[id], static_cast<TokenId>(id));
  }
}

const std::string& Vocab::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw Error(ErrorKind::Id, "unknown token id " + std::to_string(id));
  return tokens_[id];
}

std::optional<TokenId> Vocab::find(std::string_view bytes) const {
  auto it = lookup_.find(std::string(bytes));
  if (it == lookup_.end()) return std::nullopt;
  return it->second;
}

std::vector<TokenId> Vocab::encode_piece(std::string_view piece) const {
  std::vector<TokenId> ids;
  ids.reserve(piece.size());
  for (unsigned char c : piece) ids.push_back(c);
  while (ids.size() >= 2) {
    std::int32_t best = INT32_MAX;
    for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
      auto it = rank_.find(pair_key(ids[i], ids[i + 1]));
      if (it != rank_.end() && it->second < best) best = it->second;
    }
    if (best == INT32_MAX) break;
    const Merge& m = merges_[best];
    ids = apply_merge(ids, m.left, m.right, kFirstMergeId + best);
  }
  return ids;
}

Encoding Vocab::encode_with_offsets(std::string_view text) const {
  Encoding enc;
  for (const Piece& p : split_pieces(text)) {
    std::size_t off = p.begin;
    for (TokenId id : encode_piece(text.substr(p.begin, p.end - p.begin))) {
      enc.ids.push_back(id);
      enc.offsets.push_back(off);
      off += tokens_[id].size();
    }
  }
  return enc;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  return encode_with_offsets(text).ids;
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j;
  j["version"] = 1;
  auto tokens = nlohmann::json::array();
  for (const auto& t : tokens_) tokens.push_back(to_hex(t));
  j["base_tokens"] = std::move(tokens);
  auto merges = nlohmann::json::array();
  for (const auto& m : merges_) merges.push_back({m.left, m.right});
  j["merges"] = std::move(merges);
  j["special"] = {{"bos", kBos}, {"pad", kPad}};
  return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw Error(ErrorKind::Format, "unsupported vocab version");
    if (j.at("special").at("bos").get<TokenId>() != kBos ||
        j.at("special").at("pad").get<TokenId>() != kPad)
      throw Error(ErrorKind::Format, "unexpected special token ids");
    std::vector<Merge> merges;
    for (const auto& m : j.at("merges")) merges.push_back({m.at(0).get<TokenId>(), m.at(1).get<TokenId>()});
    Vocab v(std::move(merges));
    const auto& tokens = j.at("base_tokens");
    if (tokens.size() != v.size()) throw Error(ErrorKind::Format, "base_tokens length disagrees with merges");
    for (std::size_t i = 0; i < tokens.size(); ++i)
      if (from_hex(tokens[i].get<std::string>()) != v.tokens_[i])
        throw Error(ErrorKind::Format, "base token " + std::to_string(i) + " disagrees with merges");
    return v;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed vocab json: ") + e.what());
  }
}

Vocab train_bpe(std::span<const std::string> corpus, std::size_t target_size, bool byte_fallback) {
  if (!byte_fallback)
    throw Error(ErrorKind::Usage, "byte-level BPE always falls back to bytes; byte_fallback must be set");
  if (target_size < static_cast<std::size_t>(Vocab::kFirstMergeId))
    throw Error(ErrorKind::Usage, "target vocab size must be at least " +
                                      std::to_string(Vocab::kFirstMergeId));

  std::map<std::string, std::int64_t> piece_counts;
  for (const auto& doc : corpus)
    for (const Piece& p : split_pieces(doc)) ++piece_counts[doc.substr(p.begin, p.end - p.begin)];
  if (piece_counts.empty()) throw Error(ErrorKind::Degenerate, "cannot train BPE on an empty corpus");

  struct Word {
    std::vector<TokenId> ids;
    std::int64_t count;
  };
  std::vector<Word> words;
  for (const auto& [piece, count] : piece_counts) {
    Word w{{}, count};
    for (unsigned char c : piece) w.ids.push_back(c);
    words.push_back(std::move(w));
  }

  std::vector<std::string> bytes_of;
  for (int b = 0; b < kByteTokenCount; ++b) bytes_of.emplace_back(1, static_cast<char>(b));
  bytes_of.emplace_back();
  bytes_of.emplace_back();

  std::vector<Merge> merges;
  std::unordered_map<std::uint64_t, std::int64_t> pair_counts;
  while (Vocab::kFirstMergeId + merges.size() < target_size) {
    pair_counts.clear();
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.ids.size(); ++i) pair_counts[pair_key(w.ids[i], w.ids[i + 1])] += w.count;
    if (pair_counts.empty()) break;

    std::uint64_t best_key = 0;
    std::int64_t best_count = -1;
    for (const auto& [key, count] : pair_counts) {
      if (count < best_count) continue;
      if (count > best_count) {
        best_key = key;
        best_count = count;
        continue;
      }
      const auto l = static_cast<TokenId>(key >> 32), r = static_cast<TokenId>(key & 0xffffffffu);
      const auto bl = static_cast<TokenId>(best_key >> 32), br = static_cast<TokenId>(best_key & 0xffffffffu);
      if (std::tie(bytes_of[l], bytes_of[r], l, r) < std::tie(bytes_of[bl], bytes_of[br], bl, br))
        best_key = key;
    }
    const auto l = static_cast<TokenId>(best_key >> 32), r = static_cast<TokenId>(best_key & 0xffffffffu);
    const auto merged = static_cast<TokenId>(Vocab::kFirstMergeId + merges.size());
    merges.push_back({l, r});
    bytes_of.push_back(bytes_of[l] + bytes_of[r]);
    for (auto& w : words) w.ids = apply_merge(w.ids, l, r, merged);
  }
  return Vocab(std::move(merges));
}

// ---------------------------------------------------------------------------
// ExtendedVocab

ExtendedVocab ExtendedVocab::extend(const Vocab& base, std::span<const std::string> strings,
                                    bool allow_single_token) {
  ExtendedVocab ev;
  ev.base_ = base;
  ev.allow_single_token_ = allow_single_token;
  for (const auto& s : strings) {
    if (s.empty()) throw Error(ErrorKind::Usage, "added token strings must be non-empty");
    if (ev.index_.contains(s)) throw Error(ErrorKind::Duplicate, "duplicate added token '" + s + "'");
    auto sub = base.encode(s);
    if (sub.size() == 1 && !allow_single_token)
      throw Error(ErrorKind::SingleToken, "'" + s + "' is already a single token");
    const auto id = static_cast<TokenId>(base.size() + ev.added_.size());
    ev.index_.emplace(s, id);
    ev.max_pieces_ = std::max(ev.max_pieces_, split_pieces(s).size());
    ev.added_.push_back({s, id, std::move(sub)});
  }
  return ev;
}

const AddedToken& ExtendedVocab::added_token(TokenId id) const {
  if (!is_added(id)) throw Error(ErrorKind::Id, "id " + std::to_string(id) + " is not an added token");
  return added_[static_cast<std::size_t>(id) - base_.size()];
}

std::optional<TokenId> ExtendedVocab::find_added(std::string_view text) const {
  auto it = index_.find(std::string(text));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& ExtendedVocab::token_bytes(TokenId id) const {
  if (is_added(id)) return added_token(id).text;
  return base_.token_bytes(id);
}

Encoding ExtendedVocab::encode_with_offsets(std::string_view text) const {
  Encoding enc;
  const auto pieces = split_pieces(text);
  std::size_t i = 0;
  while (i < pieces.size()) {
    std::optional<TokenId> match;
    std::size_t match_end = i;
    for (std::size_t k = i; k < pieces.size() && k < i + max_pieces_; ++k) {
      const auto span = text.substr(pieces[i].begin, pieces[k].end - pieces[i].begin);
      if (auto it = index_.find(std::string(span)); it != index_.end()) {
        match = it->second;
        match_end = k;
      }
    }
    if (match) {
      enc.ids.push_back(*match);
      enc.offsets.push_back(pieces[i].begin);
      i = match_end + 1;
      continue;
    }
    const Piece& p = pieces[i];
    std::size_t off = p.begin;
    for (TokenId id : base_.encode_piece(text.substr(p.begin, p.end - p.begin))) {
      enc.ids.push_back(id);
      enc.offsets.push_back(off);
      off += base_.token_bytes(id).size();
    }
    ++i;
  }
  return enc;
}

std::vector<TokenId> ExtendedVocab::encode(std::string_view text) const {
  return encode_with_offsets(text).ids;
}

std::string ExtendedVocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

nlohmann::json ExtendedVocab::to_json() const {
  auto j = base_.to_json();
  auto added = nlohmann::json::array();
  for (const auto& a : added_)
    added.push_back({{"string", to_hex(a.text)}, {"id", a.id}, {"subtokens", a.subtokens}});
  j["added"] = std::move(added);
  j["allow_single_token"] = allow_single_token_;
  return j;
}

ExtendedVocab ExtendedVocab::from_json(const nlohmann::json& j) {
  Vocab base = Vocab::from_json(j);
  try {
    std::vector<std::string> strings;
    for (const auto& a : j.at("added")) strings.push_back(from_hex(a.at("string").get<std::string>()));
    auto ev = extend(base, strings, j.value("allow_single_token", false));
    std::size_t i = 0;
    for (const auto& a : j.at("added")) {
      const auto& mine = ev.added_[i++];
      if (a.at("id").get<TokenId>() != mine.id ||
          a.at("subtokens").get<std::vector<TokenId>>() != mine.subtokens)
        throw Error(ErrorKind::Format, "added token '" + mine.text + "' disagrees with base vocab");
    }
    return ev;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Format, std::string("malformed extended vocab json: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Candidate selection

namespace {

bool strip_char(unsigned char c) {
  return c == '\'' || kExcludedChars.find(static_cast<char>(c)) != std::string_view::npos;
}

std::map<std::string, std::size_t> count_words(std::span<const std::string> texts) {
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    std::size_t i = 0;
    while (i < text.size()) {
      while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t b = i;
      while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
      std::size_t e = i;
      while (b < e && strip_char(static_cast<unsigned char>(text[b]))) ++b;
      while (e > b && strip_char(static_cast<unsigned char>(text[e - 1]))) --e;
      if (b < e) ++counts[text.substr(b, e - b)];
    }
  }
  return counts;
}

}  // namespace

std::vector<std::string> select_tokens(std::span<const std::string> corpus,
                                       std::span<const std::string> eval_texts, const Vocab& vocab,
                                       const SelectionOptions& opts) {
  const auto eval_counts = count_words(eval_texts);
  const auto corpus_counts = count_words(corpus);
  std::vector<std::string> out;
  for (const auto& [word, count] : eval_counts) {
    if (count < opts.min_eval_count) continue;
    auto it = corpus_counts.find(word);
    const std::size_t in_corpus = it == corpus_counts.end() ? 0 : it->second;
    if (in_corpus < opts.min_corpus_count) continue;
    const bool noisy = std::any_of(word.begin(), word.end(), [](char c) {
      return (c >= '0' && c <= '9') || kExcludedChars.find(c) != std::string_view::npos;
    });
    if (noisy) continue;
    std::string candidate = " " + word;
    if (vocab.encode(candidate).size() <= 1) continue;
    out.push_back(std::move(candidate));
  }
  return out;  // std::map iteration order is already sorted
}

}  // namespace vf
