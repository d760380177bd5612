#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace std;
namespace fs = std::filesystem;

namespace {

string slurp(const fs::path& p) {
  ifstream in(p, ios::binary);
  REQUIRE(in.good());
  return string((istreambuf_iterator<char>(in)), {});
}

int run(const string& args) {
  const string cmd = string(RFL_BIN) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WEXITSTATUS(rc);
}

struct TmpDir {
  fs::path path;
  explicit TmpDir(const string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("cli: generate is deterministic and echoes its config") {
  TmpDir a("rfl_cli_gen_a"), b("rfl_cli_gen_b");
  const string flags = "generate --count 20 --seed 7 --out ";
  CHECK(run(flags + a.path.string()) == 0);
  CHECK(run(flags + b.path.string()) == 0);
  CHECK(slurp(a.path / "manifest.tsv") == slurp(b.path / "manifest.tsv"));
  CHECK(slurp(a.path / "images" / "000003.pgm") ==
        slurp(b.path / "images" / "000003.pgm"));
  CHECK(fs::exists(a.path / "config.txt"));
}

TEST_CASE("cli: infeasible l-max is a usage error (exit 2)") {
  TmpDir t("rfl_cli_gen_bad");
  CHECK(run("generate --count 5 --l-max 30 --out " + t.path.string()) == 2);
}

TEST_CASE("cli: missing checkpoint or corpus exits 2") {
  CHECK(run("eval --checkpoint /nonexistent.bin --corpus /nonexistent.tsv") ==
        2);
  TmpDir t("rfl_cli_train_bad");
  CHECK(run("train --corpus /nonexistent.tsv --out " + t.path.string()) == 2);
}

TEST_CASE("cli: train then eval round trip") {
  TmpDir data("rfl_cli_data"), runa("rfl_cli_run");
  REQUIRE(run("generate --count 24 --seed 3 --l-max 4 --out " +
              data.path.string()) == 0);
  const string manifest = (data.path / "manifest.tsv").string();
  REQUIRE(run("train --corpus " + manifest + " --out " + runa.path.string() +
              " --epochs 1 --batch 8 --channels 16 --hidden 16 --decoder ctc "
              "--adaptor jt --seed 5 --eval " +
              manifest) == 0);
  CHECK(fs::exists(runa.path / "checkpoint.bin"));
  CHECK(fs::exists(runa.path / "curve.csv"));
  CHECK(fs::exists(runa.path / "report.csv"));
  CHECK(fs::exists(runa.path / "config.txt"));
  // the echoed config is a valid --config for eval
  CHECK(run("eval --checkpoint " + (runa.path / "checkpoint.bin").string() +
            " --corpus " + manifest + " --config " +
            (runa.path / "config.txt").string()) == 0);
  // flags override file values: a wrong architecture must fail to load
  CHECK(run("eval --checkpoint " + (runa.path / "checkpoint.bin").string() +
            " --corpus " + manifest + " --config " +
            (runa.path / "config.txt").string() + " --channels 32") == 2);
}

TEST_CASE("cli: selftest passes on a fresh build (exit 0)") {
  CHECK(run("selftest") == 0);
}

TEST_CASE("cli: unknown preset and missing subcommand exit 2") {
  TmpDir t("rfl_cli_abl_bad");
  CHECK(run("ablate --preset table9 --out " + t.path.string()) == 2);
  CHECK(run("") == 2);
}
