// Drives the vocabforge executable end to end on the pretrained fixture.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vf/eval.hpp"
#include "vf/fixture.hpp"

using namespace vf;
namespace fs = std::filesystem;

namespace {

const fs::path kFixture = VF_FIXTURE_DIR;
const std::string kCli = VF_CLI_PATH;

struct Dir {
  fs::path path;
  explicit Dir(const std::string& name) : path(fs::temp_directory_path() / ("vf_cli_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Dir() { fs::remove_all(path); }
  std::string operator/(const std::string& f) const { return (path / f).string(); }
};

// Runs the CLI with `args`, returning its exit status; stderr goes to a log.
int run(const std::string& args, const std::string& log = "/dev/null") {
  const std::string cmd = kCli + " " + args + " >>" + log + " 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

std::string bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::ordered_json report(const std::string& path) { return nlohmann::ordered_json::parse(bytes(path)); }

void check_report(const std::string& path, const std::string& kind) {
  const auto j = report(path);
  std::vector<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.push_back(k);
  CHECK(keys == std::vector<std::string>{"kind", "tool_version", "seed", "config_digest", "config", "rows",
                                         "aggregate", "notes"});
  CHECK(j["kind"] == kind);
  CHECK(j["tool_version"] == kToolVersion);
}

std::string fx(const std::string& f) { return (kFixture / f).string(); }

// Five fixture candidates written as a JSON array.
std::vector<std::string> write_tokens(const Dir& d) {
  const auto f = load_or_build_fixture(kFixture);
  auto cands = select_tokens(f.train_corpus, f.eval_corpus, f.vocab, SelectionOptions{5, 35});
  cands.resize(5);
  std::ofstream(d / "tokens.json") << nlohmann::json(cands).dump() << '\n';
  return cands;
}

}  // namespace

TEST_CASE("full pipeline on the fixture") {
  Dir d("pipeline");
  const auto log = d / "log.txt";
  const auto tokens = write_tokens(d);
  const std::string model = "--model " + fx("model.vfck");

  REQUIRE(run("select-tokens --corpus " + fx("corpus.txt") + " --eval " + fx("eval.txt") + " --vocab " +
              fx("vocab.json") + " --min-corpus 35 --out " + d / "selected.json", log) == 0);
  CHECK(report(d / "selected.json").size() >= 20);
  REQUIRE(run("extend-vocab --vocab " + fx("vocab.json") + " --tokens " + d / "tokens.json" + " --out " +
              d / "ext.json", log) == 0);
  REQUIRE(run("--seed 3 retrieve --corpus " + fx("corpus.txt") + " --vocab " + d / "ext.json" +
              " --n 12 --heldout-fraction 0.5 --heldout-out " + d / "held.jsonl" + " --out " + d / "train.jsonl", log) == 0);
  const auto train = read_snippets_jsonl(d / "train.jsonl", 100);
  const auto held = read_snippets_jsonl(d / "held.jsonl", 100);
  CHECK(train.total() == 60);
  CHECK(held.total() == 30);

  REQUIRE(run("init " + model + " --vocab " + d / "ext.json" + " --method mean --out " + d / "mean.table", log) == 0);
  REQUIRE(run("train " + model + " --vocab " + d / "ext.json" + " --snippets " + d / "train.jsonl" + " --table " +
              d / "mean.table" + " --lr 0.1 --log " + d / "log.jsonl" + " --out " + d / "td.table", log) == 0);
  std::ifstream lines(d / "log.jsonl");
  std::size_t steps = 0;
  for (std::string l; std::getline(lines, l);) ++steps;
  CHECK(steps == 4);  // 60 snippets in batches of 16

  REQUIRE(run("train " + model + " --vocab " + d / "ext.json" + " --snippets " + d / "train.jsonl" + " --table " +
              d / "mean.table" + " --objective ntp_masked --lr-sweep 0.01,0.1 --heldout " + d / "held.jsonl" +
              " --sweep-out " + d / "sweep.json" + " --out " + d / "ntp.table", log) == 0);
  CHECK(report(d / "sweep.json")["rows"].size() == 2);

  for (const char* t : {"mean", "td"})
    REQUIRE(run("eval-fidelity " + model + " --vocab " + d / "ext.json" + " --table " + d / (std::string(t) + ".table") +
                " --heldout " + d / "held.jsonl" + " --out " + d / (std::string(t) + ".fidelity.json"), log) == 0);
  check_report(d / "td.fidelity.json", "fidelity");
  // Training never ends worse than its start on held-out td.
  CHECK(report(d / "td.fidelity.json")["aggregate"]["td_mean"].get<double>() <=
        1.05 * report(d / "mean.fidelity.json")["aggregate"]["td_mean"].get<double>());

  REQUIRE(run("eval-compression --vocab " + d / "ext.json" + " --texts " + fx("eval.txt") + " --out " +
              d / "compression.json", log) == 0);
  check_report(d / "compression.json", "compression");
  for (const auto& row : report(d / "compression.json")["rows"]) CHECK(row["delta_pct"].get<double>() <= 0.0);

  REQUIRE(run("eval-definitions " + model + " --vocab " + d / "ext.json" + " --table " + d / "td.table" +
              " --max-new 8 --out " + d / "defs.json", log) == 0);
  check_report(d / "defs.json", "definitions");
  CHECK(report(d / "defs.json")["rows"].size() == tokens.size());

  REQUIRE(run("generate-snippets " + model + " --vocab " + d / "ext.json" + " --target '" + tokens[0] +
              "' --n 2 --length 10 --out " + d / "gen.jsonl", log) == 0);
  CHECK(read_snippets_jsonl(d / "gen.jsonl", 10).total() == 2);

  REQUIRE(run("continued-train " + model + " --vocab " + d / "ext.json" + " --table " + d / "td.table" +
              " --corpus " + fx("eval.txt") + " --steps 3 --warmup 1 --table-out " + d / "cont.table" + " --out " +
              d / "cont.vfck", log) == 0);
  CHECK(load_checkpoint(d / "cont.vfck").config == load_checkpoint(fx("model.vfck")).config);

  REQUIRE(run("generate " + model + " --vocab " + d / "ext.json" + " --table " + d / "td.table" +
              " --prompt 'the' --max-new 5 --out " + d / "unused", d / "gen.txt") == 0);
  CHECK(bytes(d / "gen.txt").rfind("the", 0) == 0);

  REQUIRE(run("tokenize-train --corpus " + fx("eval.txt") + " --vocab-size 300 --out " + d / "small_vocab.json", log) == 0);
  CHECK(Vocab::from_json(nlohmann::json::parse(bytes(d / "small_vocab.json"))).size() == 300);
  INFO(bytes(log));
}

TEST_CASE("init --method mean equals the subtoken mean") {
  Dir d("init");
  write_tokens(d);
  REQUIRE(run("extend-vocab --vocab " + fx("vocab.json") + " --tokens " + d / "tokens.json" + " --out " + d / "ext.json") == 0);
  REQUIRE(run("init --model " + fx("model.vfck") + " --vocab " + d / "ext.json" + " --method mean --out " + d / "t") == 0);
  const auto t = NewTokenTable::load(d / "t");
  const auto w = load_checkpoint(fx("model.vfck"));
  REQUIRE(t.size() == 5);
  for (std::size_t r = 0; r < t.size(); ++r) {
    const auto want = init_subtoken_mean(w.in_emb, t.tokens[r].subtokens);
    const auto got = t.in_emb.row(r);
    CHECK(std::equal(want.begin(), want.end(), got.begin(), got.end()));
    CHECK(t.tokens[r].init == "mean");
  }
}

TEST_CASE("--seed 7 twice gives byte-identical outputs") {
  Dir d("seed");
  write_tokens(d);
  REQUIRE(run("extend-vocab --vocab " + fx("vocab.json") + " --tokens " + d / "tokens.json" + " --out " + d / "ext.json") == 0);
  const std::string model = "--model " + fx("model.vfck");
  for (const char* tag : {"a", "b"}) {
    const std::string p = tag;
    REQUIRE(run("--seed 7 retrieve --corpus " + fx("corpus.txt") + " --vocab " + d / "ext.json" +
                " --n 8 --heldout-fraction 0.5 --heldout-out " + d / (p + ".held") + " --out " + d / (p + ".train")) == 0);
    REQUIRE(run("--seed 7 init " + model + " --vocab " + d / "ext.json" + " --method random --out " + d / (p + ".init")) == 0);
    REQUIRE(run("--seed 7 train " + model + " --vocab " + d / "ext.json" + " --snippets " + d / (p + ".train") +
                " --table " + d / (p + ".init") + " --lr 0.1 --out " + d / (p + ".table")) == 0);
    REQUIRE(run("--seed 7 eval-fidelity " + model + " --vocab " + d / "ext.json" + " --table " + d / (p + ".table") +
                " --heldout " + d / (p + ".held") + " --out " + d / (p + ".report")) == 0);
  }
  for (const char* f : {".held", ".train", ".init", ".table", ".report"}) {
    INFO(f);
    const auto a = bytes(d / (std::string("a") + f));
    CHECK(!a.empty());
    CHECK(a == bytes(d / (std::string("b") + f)));
  }
  // A different seed changes the random start.
  REQUIRE(run("--seed 8 init " + model + " --vocab " + d / "ext.json" + " --method random --out " + d / "c.init") == 0);
  CHECK(bytes(d / "c.init") != bytes(d / "a.init"));
}

TEST_CASE("exit codes") {
  Dir d("exit");
  CHECK(run("") == 1);
  CHECK(run("no-such-command") == 1);
  CHECK(run("init --model " + fx("model.vfck")) == 1);  // missing --vocab
  CHECK(run("extend-vocab --vocab " + d / "missing.json" + " --tokens x --out " + d / "o") == 2);
  std::ofstream(d / "garbage.vfck") << "not a checkpoint";
  CHECK(run("eval-compression --vocab " + d / "garbage.vfck" + " --texts " + fx("eval.txt") + " --out " + d / "o") == 2);

  write_tokens(d);
  REQUIRE(run("extend-vocab --vocab " + fx("vocab.json") + " --tokens " + d / "tokens.json" + " --out " + d / "ext.json") == 0);
  REQUIRE(run("--seed 1 retrieve --corpus " + fx("corpus.txt") + " --vocab " + d / "ext.json" + " --n 4 --out " +
              d / "s.jsonl") == 0);
  REQUIRE(run("init --model " + fx("model.vfck") + " --vocab " + d / "ext.json" + " --out " + d / "t") == 0);
  const std::string train = "train --model " + fx("model.vfck") + " --vocab " + d / "ext.json" + " --snippets " +
                            d / "s.jsonl" + " --table " + d / "t" + " --out " + d / "o";
  std::ofstream(d / "bad.json") << R"({"train": {"learning_rate": 0.1}})";
  CHECK(run("--config " + d / "bad.json" + " " + train) == 1);
  std::ofstream(d / "good.json") << R"({"train": {"lr": 0.05, "epochs": 2}})";
  CHECK(run("--config " + d / "good.json" + " " + train) == 0);
  CHECK(run(train + " --lr 1e300") == 3);
}
