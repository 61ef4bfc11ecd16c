#include "vf/corpus.hpp"
#include "vf/error.hpp"
#include "vf/rng.hpp"

namespace vf {

template <typename T>
SnippetSet generate_snippets(const Weights<T>& w, const std::string& target,
                             const ExtendedVocab& vocab, const GenerationOptions& opts) {
  if (!vocab.find_added(target))
    throw Error(ErrorKind::Usage, "generate_snippets: '" + target + "' is not an added token");
  if (opts.n == 0) throw Error(ErrorKind::Usage, "generate_snippets: n must be positive");
  const std::string shown = target.starts_with(' ') ? target : " " + target;
  std::vector<TokenId> prompt{vocab.base().bos()};
  for (TokenId id : vocab.base().encode(shown)) prompt.push_back(id);
  if (prompt.size() + opts.length_tokens > w.config.max_seq)
    throw Error(ErrorKind::Length, "generate_snippets: prompt plus continuation exceeds max_seq");

  SnippetSet set;
  set.cap = opts.n;
  auto& list = set.by_target[target];
  for (std::size_t k = 0; k < opts.n; ++k) {
    Sampling s{opts.temperature, derive_seed(opts.seed, "generate:" + target + ":" + std::to_string(k))};
    const auto ids = generate(w, prompt, opts.length_tokens, s, OutputMode::Exclude);
    Snippet snip;
    snip.target = target;
    snip.text = vocab.base().decode(ids);
    snip.span_begin = shown.size() - target.size();
    snip.span_end = snip.span_begin + target.size();
    snip.provenance = Provenance::Generated;
    list.push_back(std::move(snip));
  }
  return set;
}

template SnippetSet generate_snippets(const Weights<float>&, const std::string&,
                                      const ExtendedVocab&, const GenerationOptions&);
template SnippetSet generate_snippets(const Weights<double>&, const std::string&,
                                      const ExtendedVocab&, const GenerationOptions&);

}  // namespace vf
