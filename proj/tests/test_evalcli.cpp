#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tam/cli.hpp"
#include "tam/config.hpp"
#include "tam/eval.hpp"
#include "tam/rng.hpp"

using namespace tam;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

int run_tool(std::initializer_list<const char*> args) {
  std::vector<const char*> argv{"tam"};
  argv.insert(argv.end(), args.begin(), args.end());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const {
    return sub.empty() ? path.string() : (path / sub).string();
  }
};

std::vector<std::vector<double>> gaussian_features(uint64_t seed, int n, int d, double shift) {
  Rng rng(seed);
  std::vector<std::vector<double>> out(n, std::vector<double>(d));
  for (auto& f : out)
    for (double& v : f) v = rng.normal(shift, 1.0);
  return out;
}

}  // namespace

TEST_CASE("evaluation report invariants") {
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};

  SUBCASE("a perfect predictor fills the diagonal") {
    const auto report = eval::evaluate_with(
        [&](size_t i) {
          std::vector<double> l(3, 0.0);
          l[labels[i]] = 5.0;
          return std::make_pair(l, l);
        },
        labels, 3);
    CHECK(report.accuracy == 1.0);
    for (int c = 0; c < 3; ++c) {
      CHECK(report.confusion[c][c] == 2);
      CHECK(report.per_class_accuracy[c] == 1.0);
    }
  }

  SUBCASE("a constant predictor scores one over C on balanced labels") {
    const auto report = eval::evaluate_with(
        [](size_t) {
          return std::make_pair(std::vector<double>{3.0, 0.0, 0.0},
                                std::vector<double>{3.0, 0.0, 0.0});
        },
        labels, 3);
    CHECK(report.accuracy == doctest::Approx(1.0 / 3.0));
  }

  SUBCASE("rows sum to the class counts and the trace gives the accuracy") {
    Rng rng(4);
    const auto report = eval::evaluate_with(
        [&](size_t) {
          std::vector<double> a(3), b(3);
          for (double& v : a) v = rng.uniform(-1, 1);
          for (double& v : b) v = rng.uniform(-1, 1);
          return std::make_pair(a, b);
        },
        labels, 3);
    int trace = 0;
    for (int c = 0; c < 3; ++c) {
      int row = 0;
      for (int j = 0; j < 3; ++j) row += report.confusion[c][j];
      CHECK(row == 2);
      trace += report.confusion[c][c];
    }
    CHECK(report.accuracy == doctest::Approx(static_cast<double>(trace) / 6.0));
    CHECK_THROWS_AS(eval::evaluate_with([](size_t) { return std::make_pair(std::vector<double>{},
                                                                           std::vector<double>{}); },
                                        {}, 3),
                    std::invalid_argument);
  }
}

TEST_CASE("averaged probability merges the heads") {
  const auto p = eval::averaged_probability({2.0, 0.0}, {0.0, 0.0});
  CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
  CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a-distance formula and behavior") {
  CHECK(eval::a_distance_from_error(0.5) == doctest::Approx(1.0));
  CHECK(eval::a_distance_from_error(0.0) == doctest::Approx(2.0));
  CHECK(eval::a_distance_from_error(1.0) == doctest::Approx(0.0));

  SUBCASE("identical distributions land near 1") {
    const auto fa = gaussian_features(1, 80, 8, 0.0);
    const auto fb = gaussian_features(2, 80, 8, 0.0);
    const double d = eval::a_distance(fa, fb, 7);
    CHECK(d >= 0.0);
    CHECK(d <= 2.0);
    CHECK(d >= 0.6);
    CHECK(d <= 1.4);
  }
  SUBCASE("separated distributions approach 2") {
    const auto fa = gaussian_features(3, 80, 8, 0.0);
    const auto fb = gaussian_features(4, 80, 8, 4.0);
    CHECK(eval::a_distance(fa, fb, 7) > 1.6);
  }
  SUBCASE("too few features are rejected") {
    const auto fa = gaussian_features(5, 10, 4, 0.0);
    const auto fb = gaussian_features(6, 40, 4, 0.0);
    CHECK_THROWS_AS(eval::a_distance(fa, fb, 7), std::invalid_argument);
  }
}

TEST_CASE("run configuration parsing") {
  config::RunConfig cfg;
  CHECK(cfg.seed == 1);
  cfg.set("train.batch", "8");
  CHECK(cfg.train_batch == 8);
  cfg.set("loss.lambda_sim", "0.25");
  CHECK(cfg.loss_lambda_sim == 0.25);
  CHECK_THROWS_AS(cfg.set("no.such.key", "1"), config::ConfigError);
  CHECK_THROWS_AS(cfg.set("train.batch", "eight"), config::ConfigError);
  CHECK_THROWS_AS(cfg.set("train.batch", "8x"), config::ConfigError);

  SUBCASE("file parsing with comments and the env override") {
    TempDir dir("tam_cfg_test");
    {
      std::ofstream os(dir.path / "run.cfg");
      os << "# comment line\n"
         << "seed=99\n"
         << "data.classes = 5   # torus joins in\n"
         << "\n"
         << "train.lr=0.002\n";
    }
    config::RunConfig file_cfg;
    file_cfg.load_file(dir.path / "run.cfg");
    CHECK(file_cfg.seed == 99);
    CHECK(file_cfg.data_classes == 5);
    CHECK(file_cfg.train_lr == 0.002);

    setenv("TAM_SEED", "12345", 1);
    file_cfg.apply_env();
    CHECK(file_cfg.seed == 12345);
    unsetenv("TAM_SEED");

    // serialized form parses back to the same serialization
    const std::string text = file_cfg.serialized();
    config::RunConfig back;
    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
      const auto eq = line.find('=');
      back.set(line.substr(0, eq), line.substr(eq + 1));
    }
    CHECK(back.serialized() == text);
  }

  SUBCASE("malformed file line") {
    TempDir dir("tam_cfg_bad");
    {
      std::ofstream os(dir.path / "bad.cfg");
      os << "seed 11\n";
    }
    config::RunConfig bad;
    CHECK_THROWS_AS(bad.load_file(dir.path / "bad.cfg"), config::ConfigError);
  }
}

TEST_CASE("cli rejects unknown flags without writing anything") {
  TempDir dir("tam_cli_reject");
  const auto out = dir.str("run");
  CHECK(run_tool({"generate-data", "--out", out.c_str(), "--frobnicate"}) == 1);
  CHECK_FALSE(fs::exists(out));
  CHECK(run_tool({"no-such-command"}) == 1);
  // unknown config key is a validation error as well
  CHECK(run_tool({"generate-data", "--out", out.c_str(), "--set", "bogus.key=1"}) == 1);
  CHECK_FALSE(fs::exists(out));
}

TEST_CASE("cli end-to-end: generate, adapt, eval, export, a-distance") {
  TempDir dir("tam_cli_e2e");
  const std::string data = dir.str("data");
  const std::string run_a = dir.str("run_a");
  const std::string run_b = dir.str("run_b");

  // tiny but non-trivial configuration
  const std::vector<std::string> sets = {
      "data.points_per_cloud=96", "data.train_per_class=5",  "data.test_per_class=2",
      "posenc.d0=6",              "posenc.stage_k=4",        "implicit.grid=6",
      "implicit.tri_points=6",    "implicit.n_query=3",      "implicit.k_part=12",
      "implicit.band_hi=0.3",     "model.feat_dim=8",        "model.edge_k=4",
      "model.graph_k=2",          "model.proj_hidden=8",     "model.cls_hidden_a=8",
      "model.cls_hidden_b=4",     "model.edge_hidden=6",     "train.pretrain_epochs=1",
      "train.rounds=1",           "train.epochs_per_round=1", "train.batch=8",
      "train.mix_per_batch=2",    "threads=2",               "seed=7",
  };
  std::vector<const char*> gen{"generate-data", "--out", data.c_str()};
  for (const auto& s : sets) {
    gen.push_back("--set");
    gen.push_back(s.c_str());
  }
  std::vector<const char*> argv{"tam"};
  argv.insert(argv.end(), gen.begin(), gen.end());
  REQUIRE(cli::run_cli(static_cast<int>(argv.size()), argv.data()) == 0);
  CHECK(fs::exists(fs::path(data) / "source_train.labels"));
  CHECK(fs::exists(fs::path(data) / "target_test.labels"));
  CHECK(fs::exists(fs::path(data) / "config.cfg"));

  const auto run_adapt = [&](const std::string& out) {
    std::vector<const char*> a{"tam", "adapt", "--data", data.c_str(), "--out", out.c_str()};
    for (const auto& s : sets) {
      a.push_back("--set");
      a.push_back(s.c_str());
    }
    return cli::run_cli(static_cast<int>(a.size()), a.data());
  };
  REQUIRE(run_adapt(run_a) == 0);
  REQUIRE(fs::exists(fs::path(run_a) / "model.tamw"));
  REQUIRE(fs::exists(fs::path(run_a) / "metrics.csv"));
  REQUIRE(fs::exists(fs::path(run_a) / "pretrain_metrics.csv"));

  SUBCASE("rerunning into the same non-empty directory is refused") {
    CHECK(run_adapt(run_a) == 1);
  }

  SUBCASE("identical config and seed reproduce the metrics bit for bit") {
    REQUIRE(run_adapt(run_b) == 0);
    CHECK(slurp(fs::path(run_a) / "metrics.csv") == slurp(fs::path(run_b) / "metrics.csv"));
    CHECK(slurp(fs::path(run_a) / "pretrain_metrics.csv") ==
          slurp(fs::path(run_b) / "pretrain_metrics.csv"));
    CHECK(slurp(fs::path(run_a) / "model.tamw") == slurp(fs::path(run_b) / "model.tamw"));
  }

  SUBCASE("eval reproduces the final in-loop target accuracy") {
    const std::string model = (fs::path(run_a) / "model.tamw").string();
    const std::string report = dir.str("eval.csv");
    std::vector<const char*> ev{"tam",     "eval",    "--model", model.c_str(),
                                "--data",  data.c_str(), "--split", "target_test",
                                "--out",   report.c_str()};
    REQUIRE(cli::run_cli(static_cast<int>(ev.size()), ev.data()) == 0);
    REQUIRE(fs::exists(report));

    // accuracy from the report matches the final metrics row
    const std::string metrics = slurp(fs::path(run_a) / "metrics.csv");
    const auto last_line = metrics.substr(metrics.find_last_of('\n', metrics.size() - 2) + 1);
    std::istringstream row(last_line);
    std::string field;
    for (int i = 0; i < 5; ++i) std::getline(row, field, ',');  // target_acc column
    const double in_loop = std::stod(field);

    const std::string rep = slurp(report);
    std::istringstream rep_line(rep.substr(rep.find("accuracy,") + 9));
    double eval_acc;
    rep_line >> eval_acc;
    CHECK(std::abs(eval_acc - in_loop) < 1e-6);
  }

  SUBCASE("export-features writes one row per sample") {
    const std::string model = (fs::path(run_a) / "model.tamw").string();
    const std::string csv = dir.str("features.csv");
    std::vector<const char*> ex{"tam",    "export-features", "--model", model.c_str(),
                                "--data", data.c_str(),      "--split", "source_test",
                                "--out",  csv.c_str()};
    REQUIRE(cli::run_cli(static_cast<int>(ex.size()), ex.data()) == 0);
    const std::string text = slurp(csv);
    CHECK(std::count(text.begin(), text.end(), '\n') == 1 + 8);  // header + 4 classes x 2
    CHECK(text.find("index,label,domain,f0") == 0);
  }

  SUBCASE("a-distance runs on raw global features") {
    std::vector<const char*> ad{"tam", "a-distance", "--data", data.c_str()};
    for (const auto& s : sets) {
      ad.push_back("--set");
      ad.push_back(s.c_str());
    }
    CHECK(cli::run_cli(static_cast<int>(ad.size()), ad.data()) == 0);
  }
}
