#pragma once

// The desk-scale teacher: a synthetic corpus of templated sentences over an
// invented lexicon, a byte-level BPE trained on it, and a small transformer
// pretrained on the token stream.
//
// Nouns are built from syllables and carry fixed properties (a colour, a
// home, a favourite food) that the templates repeat, so a noun's identity
// shapes what the model predicts several tokens later. Noun frequencies are
// Zipfian: frequent nouns end up as single BPE tokens, rare ones stay split
// into several subtokens and make the candidates for new tokens.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "vf/model.hpp"
#include "vf/tokenizer.hpp"

namespace vf {

struct Lexicon {
  struct Noun {
    std::string word;
    std::size_t colour = 0, home = 0, food = 0;
  };
  std::vector<Noun> nouns;  // in Zipf rank order
  std::vector<std::string> colours, homes, foods, verbs;

  static Lexicon generate(std::uint64_t seed, std::size_t n_nouns = 240);
};

// `n_docs` documents of 3 to 8 sentences, one document per string.
std::vector<std::string> synthetic_corpus(const Lexicon& lex, std::size_t n_docs,
                                          std::uint64_t seed);

struct FixtureConfig {
  std::uint64_t seed = 1234;
  std::size_t train_docs = 6000;
  std::size_t eval_docs = 1500;
  std::size_t vocab_size = 512;
  ModelConfig model{};  // vocab_size is overwritten by the trained BPE
  PretrainOptions pretrain = default_pretrain();

  // 3000 steps: a weaker teacher blurs the gap between masked NTP and the
  // subtoken mean.
  static PretrainOptions default_pretrain() {
    PretrainOptions p;
    p.steps = 3000;
    return p;
  }
};

struct Fixture {
  Lexicon lexicon;
  std::vector<std::string> train_corpus;
  std::vector<std::string> eval_corpus;
  Vocab vocab;
  Weights<float> weights;
  std::vector<double> pretrain_losses;
};

// Token stream of documents, each led by BOS.
std::vector<TokenId> token_stream(std::span<const std::string> docs, const Vocab& vocab);

// Builds everything from scratch; deterministic in cfg.seed.
Fixture build_fixture(const FixtureConfig& cfg, bool verbose = false);

// Loads `dir` if it holds a fixture for the same config, else builds and
// saves one there. Files: corpus.txt, eval.txt, vocab.json, model.vfck,
// pretrain_loss.txt and fixture.json.
Fixture load_or_build_fixture(const std::filesystem::path& dir, const FixtureConfig& cfg = {},
                              bool verbose = false);

}  // namespace vf
