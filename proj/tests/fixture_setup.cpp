// Builds (or loads from cache) the pretrained fixture used by the acceptance
// run and the CLI tests.
//
// usage: fixture_setup <dir>

#include <iostream>

#include "vf/error.hpp"
#include "vf/fixture.hpp"

int main(int argc, char** argv) {
  if (argc != 2) {
    std::cerr << "usage: fixture_setup <dir>\n";
    return 1;
  }
  try {
    const auto f = vf::load_or_build_fixture(argv[1], vf::FixtureConfig{}, true);
    std::cout << "fixture: " << f.train_corpus.size() << " train docs, " << f.eval_corpus.size()
              << " eval docs, vocab " << f.vocab.size() << ", final pretrain loss "
              << (f.pretrain_losses.empty() ? 0.0 : f.pretrain_losses.back()) << '\n';
  } catch (const vf::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return vf::exit_code(e.kind());
  }
  return 0;
}
