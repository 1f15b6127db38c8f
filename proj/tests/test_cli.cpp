#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "hsalab/config.hpp"
#include "hsalab/manifest.hpp"

using namespace hsalab;

namespace {

int run_cli(const std::string& args) {
#ifdef HSALAB_BIN
  const std::string cmd = std::string(HSALAB_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
#else
  (void)args;
  return -1;
#endif
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config parses key=value text with comments") {
    const auto cfg = parse_run_config(
        "# comment\n"
        "d = 32\n"
        "g = 1\n"
        "h = 2\n"
        "d_h = 16\n"
        "S = 8\n"
        "seg_len = 32\n"
        "lr_peak = 1e-3\n"
        "task = niah\n"
        "mode = random_carry\n");
    CHECK(cfg.model.d == 32);
    CHECK(cfg.model.S == 8);
    CHECK(cfg.optim.lr_peak == doctest::Approx(1e-3));
    CHECK(cfg.task.task == "niah");
    CHECK(cfg.mode == ResetMode::random_carry);
  }

  TEST_CASE("unknown keys are rejected by name") {
    try {
      parse_run_config("dd = 32\n");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("dd") != std::string::npos);
    }
  }

  TEST_CASE("bad values are rejected") {
    CHECK_THROWS_AS(parse_run_config("d = banana\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("lr_peak = fast\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("just a line\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("mode = sometimes\n"), ConfigError);
  }

  TEST_CASE("serialize/parse round trip") {
    RunConfig cfg;
    cfg.model.d = 64;
    cfg.model.h = 2;
    cfg.model.d_h = 32;
    cfg.model.seg_len = 128;
    cfg.task.context_len = 256;
    cfg.mode = ResetMode::random_carry;
    cfg.optim.lr_peak = 5e-4;
    const auto text = serialize_run_config(cfg);
    const auto back = parse_run_config(text);
    CHECK(back.model.d == 64);
    CHECK(back.mode == ResetMode::random_carry);
    CHECK(back.optim.lr_peak == doctest::Approx(5e-4));
    CHECK(serialize_run_config(back) == text);
  }

  TEST_CASE("config invariants are enforced") {
    RunConfig cfg;
    cfg.model.d = 100;  // not g*h*d_h
    CHECK_THROWS_AS(cfg.validate(), InputError);
  }

  TEST_CASE("manifest lands in the output directory before work starts") {
    RunManifest m;
    m.command = "train";
    m.seed = 7;
    m.workers = 2;
    m.precision = "f32";
    m.git_describe = current_git_describe();
    m.start_time = current_time_iso8601();
    m.out_dir = "manifest_test_out";
    write_manifest(m);
    CHECK(std::filesystem::exists("manifest_test_out/manifest.json"));
    std::ifstream in("manifest_test_out/manifest.json");
    std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(all.find("\"seed\": 7") != std::string::npos);
    CHECK(all.find("\"command\": \"train\"") != std::string::npos);
    std::filesystem::remove_all("manifest_test_out");
  }

#ifdef HSALAB_BIN
  TEST_CASE("exit codes: 0 success, 1 failure, 2 usage") {
    // Usage error: unknown flag.
    CHECK(run_cli("--no-such-flag") == 2);
    // Config error: unknown key in config file.
    std::filesystem::create_directories("cli_test_out");
    {
      std::ofstream bad("cli_test_out/bad.cfg");
      bad << "nonsense = 1\n";
    }
    CHECK(run_cli("--config cli_test_out/bad.cfg --out cli_test_out fuzz --iterations 1") == 2);
    // Success: a very small fuzz run.
    CHECK(run_cli("--seed 5 --out cli_test_out fuzz --iterations 2") == 0);
    std::filesystem::remove_all("cli_test_out");
  }

  TEST_CASE("fuzz replay: the same seed reproduces the same verdict") {
    std::filesystem::create_directories("cli_test_out2");
    const int a = run_cli("--seed 123 --out cli_test_out2 fuzz --iterations 3");
    const int b = run_cli("--seed 123 --out cli_test_out2 fuzz --iterations 3");
    CHECK(a == b);
    CHECK(a == 0);
    std::filesystem::remove_all("cli_test_out2");
  }
#endif
}
