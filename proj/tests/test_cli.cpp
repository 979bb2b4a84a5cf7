#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <sstream>

#include <json.hpp>

#include "cone/cli.hpp"
#include "cone/model.hpp"
#include "helpers.hpp"

using namespace cone;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

int cone_exit(const std::string &args) {
  const std::string cmd = "CONE_LOG=error \"" CONE_EXE "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::vector<std::string> lines(const fs::path &p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  std::string l;
  while (std::getline(in, l)) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string &line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) out.push_back(f);
  return out;
}

std::string q(const fs::path &p) { return "\"" + p.string() + "\""; }

}  // namespace

TEST_CASE("config json round trip and hash") {
  RunConfig c;
  c.train.epochs = 7;
  c.train.backbone_dims = {8, 4};
  c.data.train_csv = "x.csv";
  const json doc = config_to_json(c);
  CHECK(doc.at("epochs") == 7);
  for (const char *key : {"epochs", "tau_sup", "backbone_dims", "train_csv", "data_max_samples",
                          "data_center_attempts", "test_fraction"})
    CHECK(doc.contains(key));
  const RunConfig back = config_from_json(json::parse(doc.dump()));
  CHECK(back == c);
  CHECK(config_hash(back) == config_hash(c));
  CHECK(config_hash(c).size() == 16);
  RunConfig other = c;
  other.train.seed = 9;
  CHECK(config_hash(other) != config_hash(c));
}

TEST_CASE("config errors name the field") {
  auto field_of = [](const json &doc) -> std::string {
    try {
      config_from_json(doc);
    } catch (const ConfigError &e) {
      return e.field();
    }
    return "";
  };
  CHECK(field_of(json{{"epochz", 3}}) == "epochz");
  CHECK(field_of(json{{"epochs", -3}}) == "epochs");
  CHECK(field_of(json{{"epochs", 2.5}}) == "epochs");
  CHECK(field_of(json{{"use_ce", 1}}) == "use_ce");
  CHECK(field_of(json{{"tau_sup", "0.1"}}) == "tau_sup");
  CHECK(field_of(json{{"tau_sup", 0}}) == "tau_sup");
  CHECK(field_of(json{{"backbone_dims", json::array({4, -1})}}) == "backbone_dims");
  CHECK(field_of(json{{"test_fraction", 1.0}}) == "test_fraction");
  CHECK(field_of(json{{"use_ce", false}, {"use_sup_in", false}, {"use_dc", false}}) == "use_ce");
  CHECK(field_of(json::array()) == "config");
  CHECK(field_of(json{{"epochs", 2}}) == "warmup_epochs");
  CHECK(field_of(json{{"epochs", 3}, {"warmup_epochs", 1}}).empty());
}

TEST_CASE("overrides") {
  json doc = config_to_json(RunConfig{});
  apply_override(doc, "epochs=3");
  apply_override(doc, "tau_sup=0.2");
  apply_override(doc, "use_dc=false");
  apply_override(doc, "backbone_dims=[8,8,8]");
  apply_override(doc, "train_csv=data/train.csv");
  const RunConfig c = config_from_json(doc);
  CHECK(c.train.epochs == 3);
  CHECK(c.train.tau_sup == 0.2);
  CHECK_FALSE(c.train.use_dc);
  CHECK(c.train.backbone_dims == std::vector<std::size_t>{8, 8, 8});
  CHECK(c.data.train_csv == "data/train.csv");
  CHECK_THROWS_AS(apply_override(doc, "nope=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "epochs"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "=3"), ConfigError);
}

TEST_CASE("run data sizes") {
  RunConfig c;
  c.data.data_n_per_mode = 313;
  c.data.data_max_samples = 2500;
  const auto [train, test] = load_run_data(c);
  CHECK(train.size() == 2000);
  CHECK(test.size() == 500);
  const auto again = load_run_data(c);
  CHECK(again.first == train);
}

TEST_CASE("usage errors") {
  CHECK(cone_exit("--help") == 0);
  CHECK(cone_exit("") == 2);
  CHECK(cone_exit("frobnicate") == 2);
  CHECK(cone_exit("train --config /nonexistent/cone.json") == 2);
  CHECK(cone_exit("train --set nope=1") == 2);
  CHECK(cone_exit("train --set tau_sup=0") == 2);
  CHECK(cone_exit("train --set epochs=1") == 2);
  CHECK(cone_exit("analyze coefficients") == 2);
  CHECK(cone_exit("analyze margins --run /nonexistent/run") == 2);
}

TEST_CASE("train writes a complete run directory") {
  testing::TempDir dir("cli_train");
  {
    std::ofstream cfg(dir / "cone.json");
    cfg << R"({"data_n_per_mode": 60, "batch_size": 32})";
  }
  REQUIRE(cone_exit("train --config " + q(dir / "cone.json") + " --set epochs=1 --set warmup_epochs=1 --seed 5 --out " +
                    q(dir / "run")) == 0);
  const fs::path run = dir / "run";
  for (const char *f : {"manifest.json", "config.json", "metrics.csv", "metrics.jsonl",
                        "checkpoint.json", "ema_checkpoint.json", "bank.json", "train.csv",
                        "test.csv"})
    CHECK(fs::exists(run / f));
  CHECK(lines(run / "metrics.csv").size() == 2);
  CHECK(lines(run / "metrics.jsonl").size() == 1);

  const json manifest = json::parse(testing::slurp(run / "manifest.json"));
  CHECK(manifest.at("status") == "ok");
  CHECK(manifest.at("seed") == 5);
  CHECK(manifest.at("config").at("epochs") == 1);
  CHECK(manifest.at("config").at("batch_size") == 32);
  CHECK(manifest.at("sub_seeds").at("init") == derive_seed(5, "init"));
  const RunConfig resolved = config_from_json(manifest.at("config"));
  CHECK(manifest.at("config_hash") == config_hash(resolved));
  CHECK(json::parse(testing::slurp(run / "config.json")) == manifest.at("config"));
  CHECK_FALSE(manifest.at("finished_at").is_null());

  SUBCASE("analysis commands") {
    REQUIRE(cone_exit("analyze coefficients --run " + q(run) + " --samples 0,2,5") == 0);
    const auto coef = lines(run / "coefficients.csv");
    CHECK(coef.front() == "sample_id,anchor_idx,is_positive,cos_sim,alpha");
    CHECK(coef.size() > 1);
    CHECK(fields(coef.back())[0] == "5");

    REQUIRE(cone_exit("analyze margins --run " + q(run)) == 0);
    const std::string first = testing::slurp(run / "margins.csv");
    REQUIRE(cone_exit("analyze margins --run " + q(run)) == 0);
    CHECK(testing::slurp(run / "margins.csv") == first);

    REQUIRE(cone_exit("analyze export --run " + q(run) + " --out " + q(dir / "f.csv")) == 0);
    CHECK(lines(dir / "f.csv").size() == lines(run / "train.csv").size());
    REQUIRE(cone_exit("analyze export --run " + q(run) + " --data " + q(run / "test.csv") +
                      " --out " + q(dir / "g.csv")) == 0);
    CHECK(lines(dir / "g.csv").size() == lines(run / "test.csv").size());

    CHECK(cone_exit("analyze coefficients --run " + q(run) + " --samples 100000") == 2);
  }

  SUBCASE("incompatible bank") {
    REQUIRE(cone_exit("train --config " + q(dir / "cone.json") +
                      " --set epochs=1 --set warmup_epochs=1 --set proj_dim=5 --out " + q(dir / "other")) == 0);
    CHECK(cone_exit("analyze margins --run " + q(run) + " --bank " + q(dir / "other" / "bank.json")) == 2);
    CHECK(cone_exit("analyze coefficients --checkpoint " + q(run / "checkpoint.json") + " --bank " +
                    q(dir / "other" / "bank.json") + " --data " + q(run / "train.csv")) == 2);
  }
}

TEST_CASE("CE-only ablation equals the CE trainer") {
  testing::TempDir dir("cli_ce");
  const std::string common = "--set epochs=2 --set warmup_epochs=1 --set data_n_per_mode=50 --seed 3 ";
  REQUIRE(cone_exit("train " + common + "--set lambda_sup=0 --set lambda_dc=0 --out " + q(dir / "zero")) == 0);

  RunConfig direct;
  direct.train.epochs = 2;
  direct.train.warmup_epochs = 1;
  direct.train.seed = 3;
  direct.data.data_n_per_mode = 50;
  direct.train.use_sup_in = false;
  direct.train.use_dc = false;
  const auto [train, test] = load_run_data(direct);
  const FitResult r = fit(direct.train, train, test);

  const auto rows = lines(dir / "zero" / "metrics.csv");
  REQUIRE(rows.size() == 3);
  for (std::size_t e = 0; e < 2; ++e) {
    const auto f = fields(rows[e + 1]);
    CHECK(std::stod(f[2]) == r.metrics[e].l_ce);
    CHECK(std::stod(f[6]) == r.metrics[e].train_acc);
    CHECK(std::stod(f[7]) == r.metrics[e].test_acc);
  }
  CHECK(load_checkpoint(dir / "zero" / "checkpoint.json") == r.state.query);
}

TEST_CASE("numeric abort exits 3") {
  testing::TempDir dir("cli_abort");
  {
    std::ofstream d(dir / "huge.csv");
    d << "label,f0,f1\n";
    for (int i = 0; i < 20; ++i) d << i % 2 << ",1e308,-1e308\n";
  }
  CHECK(cone_exit("train --set epochs=1 --set warmup_epochs=1 --set train_csv=" + q(dir / "huge.csv") + " --out " +
                  q(dir / "run")) == 3);
  CHECK(fs::exists(dir / "run" / "abort_batch.csv"));
  CHECK(json::parse(testing::slurp(dir / "run" / "manifest.json")).at("status") == "aborted");
}

TEST_CASE("gradcheck") {
  CHECK(cone_exit("gradcheck") == 0);
  CHECK(cone_exit("gradcheck --inject-fault") == 1);
  CHECK(cone_exit("gradcheck --tolerance 1e-12") == 1);
  CHECK(cone_exit("gradcheck --set use_sup_out=true --set use_sup_in=false") == 0);
}

TEST_CASE("gendata") {
  testing::TempDir dir("cli_gen");
  REQUIRE(cone_exit("gendata --seed 4 --out " + q(dir / "a.csv")) == 0);
  REQUIRE(cone_exit("gendata --seed 4 --out " + q(dir / "b.csv")) == 0);
  CHECK(lines(dir / "a.csv").size() == 2001);
  CHECK(testing::slurp(dir / "a.csv") == testing::slurp(dir / "b.csv"));

  SeededRng rng(derive_seed(4, "data"));
  const Dataset mem = gen_multimode({}, rng);
  CHECK(load_csv(dir / "a.csv", {true, 4}) == mem);

  CHECK(cone_exit("gendata --set data_modes=50 --set data_classes=50 --set data_dim=1 "
                  "--set data_center_attempts=100 --out " + q(dir / "c.csv")) == 3);
}
