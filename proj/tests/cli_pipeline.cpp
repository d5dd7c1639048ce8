// Drives the built snnlm binary end to end: pipeline smoke, report contracts,
// determinism, config precedence and error exit codes.

#include "doctest.h"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "support/test_util.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;  // stdout + stderr
};

RunResult run_cli(const std::string& args) {
  const std::string out_file = "cli_tmp/last_output.txt";
  const std::string cmd = std::string(SNNLM_BIN_PATH) + " " + args + " > " + out_file + " 2>&1";
  const int rc = std::system(cmd.c_str());
  std::ifstream f(out_file);
  std::stringstream ss;
  ss << f.rdbuf();
  return {WEXITSTATUS(rc), ss.str()};
}

std::string file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Shared tiny-pipeline fixture: corpus + config written once.
struct Fixture {
  std::string corpus = "cli_tmp/corpus.txt";
  std::string config = "cli_tmp/tiny.ini";

  Fixture() {
    fs::create_directories("cli_tmp");
    std::ofstream c(corpus, std::ios::binary);
    c << testsupport::make_play_corpus(80000, 99);
    std::ofstream cfg(config);
    cfg << "[model]\nn_layer = 2\nn_head = 2\nd_model = 32\nblock_size = 32\n"
        << "[train]\nsteps = 200\nlr = 0.003\nbatch = 4\nseed = 1\n"
        << "[snn]\ntime_window = 16\n"
        << "[finetune]\nlr = 0.05\nsteps = 50\nbatch = 2\nslope_k = 4\nseed = 2\ntime_window = 8\n"
        << "[eval]\ntokens = 1024\ncalib_sequences = 4\n"
        << "[data]\ncorpus_path = " << corpus << "\n";
  }
};

const Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("full pipeline: train, convert, finetune, eval, generate, energy, gradcheck") {
  const Fixture& fx = fixture();

  RunResult train = run_cli("train --config " + fx.config + " --out cli_tmp/ann.ntck");
  CHECK(train.exit_code == 0);
  CHECK(train.output.find("val loss") != std::string::npos);

  RunResult convert = run_cli("convert --config " + fx.config +
                              " --in cli_tmp/ann.ntck --out cli_tmp/snn.ntck");
  CHECK(convert.exit_code == 0);
  CHECK(fs::exists("cli_tmp/snn.ntck"));
  CHECK(fs::exists("cli_tmp/snn.ntck.report.json"));
  // conversion report invariants: s_norm == a per layer, every layer once
  {
    auto rep = nlohmann::json::parse(file_bytes("cli_tmp/snn.ntck.report.json"));
    CHECK(rep.at("encoder_clip").get<double>() > 0.0);
    std::set<std::string> names;
    for (const auto& l : rep.at("layers")) {
      CHECK(l.at("a").get<double>() == l.at("s_norm").get<double>());
      CHECK(names.insert(l.at("name").get<std::string>()).second);
    }
    CHECK(names.size() == 6);  // 3 probes x 2 layers
  }

  RunResult finetune = run_cli("finetune --config " + fx.config +
                               " --snn cli_tmp/snn.ntck --ann cli_tmp/ann.ntck"
                               " --out cli_tmp/tuned.ntck --loss-csv cli_tmp/loss.csv");
  CHECK(finetune.exit_code == 0);
  {
    std::ifstream f("cli_tmp/loss.csv");
    std::string header;
    std::getline(f, header);
    CHECK(header == "step,loss");
    int rows = 0;
    std::string line;
    while (std::getline(f, line))
      if (!line.empty()) ++rows;
    CHECK(rows == 50);
  }

  RunResult eval = run_cli("eval --config " + fx.config +
                           " --ann cli_tmp/ann.ntck --snn cli_tmp/tuned.ntck"
                           " --out-dir cli_tmp/reports");
  CHECK(eval.exit_code == 0);
  {
    auto rep = nlohmann::json::parse(file_bytes("cli_tmp/reports/eval_report.json"));
    CHECK(rep.contains("snn"));
    CHECK(rep.at("token_accuracy").get<double>() >= 0.0);
    CHECK(rep.at("cosine_similarity").get<double>() <= 1.0);
    auto en = nlohmann::json::parse(file_bytes("cli_tmp/reports/energy_report.json"));
    CHECK(en.at("asa").at("mac_count").get<std::uint64_t>() > 0);
    CHECK(en.at("ssa").at("ac_count").get<std::uint64_t>() > 0);
    // exact energy identities
    CHECK(en.at("asa").at("energy_pj").get<double>() ==
          4.6 * en.at("asa").at("mac_count").get<double>());
    CHECK(en.at("ssa").at("energy_pj").get<double>() ==
          0.9 * en.at("ssa").at("ac_count").get<double>());
  }

  RunResult gen = run_cli("generate --config " + fx.config +
                          " --ckpt cli_tmp/ann.ntck --prompt \"DUKE:\" --tokens 40");
  CHECK(gen.exit_code == 0);
  CHECK(gen.output.size() > 40);

  RunResult gen_snn = run_cli("generate --config " + fx.config +
                              " --ckpt cli_tmp/tuned.ntck --prompt \"DUKE:\" --tokens 5");
  CHECK(gen_snn.exit_code == 0);

  RunResult energy = run_cli("energy --config " + fx.config +
                             " --snn cli_tmp/tuned.ntck --out-dir cli_tmp/reports2");
  CHECK(energy.exit_code == 0);
  CHECK(fs::exists("cli_tmp/reports2/energy_report.csv"));

  RunResult grad = run_cli("gradcheck");
  CHECK(grad.exit_code == 0);
  CHECK(grad.output.find("PASS") != std::string::npos);
}

TEST_CASE("eval on the analog checkpoint alone omits SNN fields") {
  const Fixture& fx = fixture();
  REQUIRE(fs::exists("cli_tmp/ann.ntck"));
  RunResult eval = run_cli("eval --config " + fx.config +
                           " --ann cli_tmp/ann.ntck --out-dir cli_tmp/reports_ann");
  CHECK(eval.exit_code == 0);
  auto rep = nlohmann::json::parse(file_bytes("cli_tmp/reports_ann/eval_report.json"));
  CHECK(!rep.contains("snn"));
  CHECK(!rep.contains("token_accuracy"));
  CHECK(!fs::exists("cli_tmp/reports_ann/energy_report.json"));
}

TEST_CASE("seeded runs are byte-identical (checkpoints and reports)") {
  const Fixture& fx = fixture();
  const std::string small =
      " --set train.steps=30 --set model.n_layer=1 --set model.d_model=16 --set eval.tokens=256";
  for (const char* dir : {"cli_tmp/runA", "cli_tmp/runB"}) {
    fs::create_directories(dir);
    std::string d(dir);
    REQUIRE(run_cli("train --config " + fx.config + small + " --seed 9 --out " + d + "/ann.ntck")
                .exit_code == 0);
    REQUIRE(run_cli("convert --config " + fx.config + small + " --seed 9 --in " + d +
                    "/ann.ntck --out " + d + "/snn.ntck --report " + d + "/report.json")
                .exit_code == 0);
    REQUIRE(run_cli("eval --config " + fx.config + small + " --seed 9 --ann " + d +
                    "/ann.ntck --snn " + d + "/snn.ntck --out-dir " + d)
                .exit_code == 0);
  }
  CHECK(file_bytes("cli_tmp/runA/ann.ntck") == file_bytes("cli_tmp/runB/ann.ntck"));
  CHECK(file_bytes("cli_tmp/runA/report.json") == file_bytes("cli_tmp/runB/report.json"));
  CHECK(file_bytes("cli_tmp/runA/eval_report.json") == file_bytes("cli_tmp/runB/eval_report.json"));
  CHECK(file_bytes("cli_tmp/runA/eval_report.csv") == file_bytes("cli_tmp/runB/eval_report.csv"));
  CHECK(file_bytes("cli_tmp/runA/energy_report.json") ==
        file_bytes("cli_tmp/runB/energy_report.json"));
}

TEST_CASE("config precedence: file < --set < explicit flag") {
  const Fixture& fx = fixture();
  const std::string small = " --set model.n_layer=1 --set model.d_model=16 --set train.steps=12";
  // layer 1: file (train.seed = 1)
  REQUIRE(run_cli("train --config " + fx.config + small + " --out cli_tmp/pA.ntck").exit_code == 0);
  // layer 2: --set overrides the file
  REQUIRE(run_cli("train --config " + fx.config + small +
                  " --set train.seed=2 --out cli_tmp/pB.ntck")
              .exit_code == 0);
  REQUIRE(run_cli("train --config " + fx.config + small +
                  " --set train.seed=2 --out cli_tmp/pB2.ntck")
              .exit_code == 0);
  // layer 3: --seed overrides --set
  REQUIRE(run_cli("train --config " + fx.config + small +
                  " --set train.seed=2 --seed 3 --out cli_tmp/pC.ntck")
              .exit_code == 0);
  const std::string a = file_bytes("cli_tmp/pA.ntck");
  const std::string b = file_bytes("cli_tmp/pB.ntck");
  const std::string b2 = file_bytes("cli_tmp/pB2.ntck");
  const std::string c = file_bytes("cli_tmp/pC.ntck");
  CHECK(a != b);   // --set changed the outcome
  CHECK(b == b2);  // deterministically
  CHECK(c != b);   // --seed changed it again
  CHECK(c != a);
}

TEST_CASE("distinct exit codes and machine-readable error lines") {
  const Fixture& fx = fixture();
  // config type error -> 2
  RunResult bad_cfg = run_cli("train --config " + fx.config + " --set train.steps=soon");
  CHECK(bad_cfg.exit_code == 2);
  CHECK(bad_cfg.output.find("error: code=config") != std::string::npos);
  // missing checkpoint -> 3
  RunResult missing = run_cli("eval --config " + fx.config + " --ann cli_tmp/nope.ntck");
  CHECK(missing.exit_code == 3);
  CHECK(missing.output.find("error: code=io") != std::string::npos);
  // corrupted checkpoint -> 4
  {
    std::ofstream f("cli_tmp/corrupt.ntck", std::ios::binary);
    f << "XXXXGARBAGE";
  }
  RunResult corrupt = run_cli("eval --config " + fx.config + " --ann cli_tmp/corrupt.ntck");
  CHECK(corrupt.exit_code == 4);
  // incompatible kind -> 5
  REQUIRE(fs::exists("cli_tmp/snn.ntck"));
  RunResult wrong_kind = run_cli("eval --config " + fx.config + " --ann cli_tmp/snn.ntck");
  CHECK(wrong_kind.exit_code == 5);
  CHECK(wrong_kind.output.find("error: code=incompatible_kind") != std::string::npos);
}

}  // TEST_SUITE
