#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "e2fv_reader.hpp"
#include "e2mpl/config.hpp"
#include "e2mpl/run.hpp"

using namespace e2mpl;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "e2mpl_harness" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) { return e2fv::read_bytes(p.string()); }

// Runs the CLI with stderr captured to `log`; returns the exit status.
int cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(E2MPL_CLI) + " " + args + " 2> " + log.string() + " > /dev/null";
  const int raw = std::system(cmd.c_str());
  return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
}

const char* kQuick = "--set episodes_per_epoch=4 --num-tasks 6 --workers 2";

}  // namespace

TEST_CASE("config validation names the offending key") {
  RunConfig c;
  c.shot_count = -1;
  try {
    c.validate();
    FAIL("expected a ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "shot_count");
    CHECK(std::string(e.what()).find("shot_count") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_config("not_a_key = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("shot_count = three\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("shot_count 3\n"), ConfigError);
  CHECK_THROWS_AS(apply_overrides(c, {"lambda_d"}), ConfigError);
}

TEST_CASE("config text round trips and drives the digest") {
  const RunConfig base;
  CHECK(base.lambda_d == 0.01);
  CHECK(base.lambda_f == 0.01);
  const RunConfig back = parse_config(base.canonical_text());
  CHECK(back.canonical_text() == base.canonical_text());
  CHECK(back.digest() == base.digest());

  RunConfig same = base;
  apply_overrides(same, {"lambda_d=0.01", "lambda_f=0.01"});
  CHECK(same.digest() == base.digest());
  RunConfig other = base;
  apply_overrides(other, {"lambda_d=0.02"});
  CHECK(other.digest() != base.digest());

  const RunConfig parsed = parse_config("# comment\nseed = 7\ndata_source = \"synthetic\"\nshot_count = 5  # trailing\n");
  CHECK(parsed.seed == 7);
  CHECK(parsed.shot_count == 5);
  CHECK(parsed.data_source == "synthetic");

  std::set<std::string> keys(RunConfig::keys().begin(), RunConfig::keys().end());
  for (const char* k : {"disable_prompts", "disable_adapter", "disable_lf", "disable_ld", "sinkhorn_tol", "way_count"})
    CHECK(keys.count(k) == 1);
}

TEST_CASE("train and eval through the command line") {
  const fs::path dir = scratch("cli");
  const fs::path log = dir / "log.txt";

  REQUIRE(cli(std::string("train ") + kQuick + " --seed 7 --out " + (dir / "a").string(), log) == 0);
  REQUIRE(cli(std::string("train ") + kQuick + " --seed 7 --out " + (dir / "b").string(), log) == 0);
  const std::string hist = slurp(dir / "a" / "history.ndjson");
  CHECK(hist == slurp(dir / "b" / "history.ndjson"));
  CHECK(slurp(dir / "a" / "checkpoint.e2ck") == slurp(dir / "b" / "checkpoint.e2ck"));

  // The first history line carries the digest and seed.
  const auto head = nlohmann::json::parse(hist.substr(0, hist.find('\n')));
  CHECK(head["seed"] == 7);
  const std::string config_txt = slurp(dir / "a" / "config.txt");
  CHECK(config_txt.find("# digest " + head["config_digest"].get<std::string>()) == 0);
  CHECK(config_txt.find("lambda_d = 0.01\n") != std::string::npos);
  CHECK(config_txt.find("lambda_f = 0.01\n") != std::string::npos);

  const std::string ck = (dir / "a" / "checkpoint.e2ck").string();
  REQUIRE(cli("eval --checkpoint " + ck + " --num-tasks 6 --workers 1 --out " + (dir / "e1").string(), log) == 0);
  REQUIRE(cli("eval --checkpoint " + ck + " --num-tasks 6 --workers 3 --out " + (dir / "e2").string(), log) == 0);
  const std::string ev = slurp(dir / "e1" / "eval.json");
  CHECK(ev == slurp(dir / "e2" / "eval.json"));
  CHECK(slurp(dir / "e1" / "tasks.csv") == slurp(dir / "e2" / "tasks.csv"));
  const auto j = nlohmann::json::parse(ev);
  CHECK(j["config_digest"] == head["config_digest"]);
  CHECK(j["seed"] == 7);
  CHECK(j["num_tasks"] == 6);
  CHECK(j["solve_contract_ok"] == true);
  for (const char* k : {"mean", "variance", "median", "q1", "q3", "iqr"}) CHECK(j["accuracy"].contains(k));
  CHECK(nlohmann::json::parse(slurp(dir / "e1" / "eval_timing.json"))["adapt_millis"].size() == 6);

  REQUIRE(cli("eval --checkpoint " + ck + " --num-tasks 1 --out " + (dir / "one").string(), log) == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "one" / "eval.json"))["accuracy"]["iqr"] == 0.0);
}

TEST_CASE("command line exit codes") {
  const fs::path dir = scratch("codes");
  const fs::path log = dir / "log.txt";

  CHECK(cli("train --set shot_count=-1 --out " + dir.string(), log) == 1);
  CHECK(slurp(log).find("shot_count") != std::string::npos);
  CHECK(cli("train --set no_such_key=1 --out " + dir.string(), log) == 1);
  CHECK(slurp(log).find("no_such_key") != std::string::npos);
  CHECK(cli("train --config " + (dir / "missing.cfg").string(), log) == 1);
  CHECK(cli("bogus", log) == 1);

  CHECK(cli("eval --checkpoint " + (dir / "missing.e2ck").string(), log) == 1);
  std::ofstream(dir / "corrupt.e2ck", std::ios::binary) << "E2CKgarbage";
  CHECK(cli("eval --checkpoint " + (dir / "corrupt.e2ck").string(), log) == 1);

  // Feature files that do not exist are a runtime failure, not a config error.
  CHECK(cli("train --set data_source=files --set source_path=" + (dir / "x.e2fv").string() +
                " --set target_path=" + (dir / "y.e2fv").string() + " --out " + dir.string(),
            log) == 2);
}

TEST_CASE("gen-data writes pools an independent reader agrees with") {
  const fs::path dir = scratch("gen");
  const fs::path log = dir / "log.txt";
  REQUIRE(cli("gen-data --seed 3 --set num_classes=12 --set train_classes=7 --set test_classes=5 --set per_class=20 "
              "--out " + (dir / "a").string(),
              log) == 0);
  REQUIRE(cli("gen-data --seed 3 --set num_classes=12 --set train_classes=7 --set test_classes=5 --set per_class=20 "
              "--out " + (dir / "b").string(),
              log) == 0);
  for (const char* f : {"source.e2fv", "target.e2fv", "manifest.json"})
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  const auto manifest = nlohmann::json::parse(slurp(dir / "a" / "manifest.json"));
  const std::string bytes = slurp(dir / "a" / "source.e2fv");
  const auto h = e2fv::parse_header(bytes);
  CHECK(h.magic == "E2FV");
  CHECK(h.rows == 240);
  CHECK(h.dim == 64);
  CHECK(h.has_labels == 1);
  CHECK(manifest["source_rows"] == h.rows);
  CHECK(manifest["dim"] == h.dim);
  CHECK(manifest["num_classes"] == 12);
  CHECK(bytes.size() == 28 + h.rows * h.dim * 4 + h.rows * 8);

  // The written pools are usable as training input.
  const std::string files = " --set data_source=files --set source_path=" + (dir / "a" / "source.e2fv").string() +
                            " --set target_path=" + (dir / "a" / "target.e2fv").string();
  const std::string common =
      std::string(" --seed 3 --set num_classes=12 --set train_classes=7 --set test_classes=5 --set per_class=20 ") +
      kQuick;
  REQUIRE(cli("train" + common + files + " --out " + (dir / "tf").string(), log) == 0);
  const std::string hist = slurp(dir / "tf" / "history.ndjson");
  CHECK(hist.find("\"skipped\":false") != std::string::npos);
}

TEST_CASE("ablation grid structure") {
  RunConfig cfg;
  cfg.episodes_per_epoch = 3;
  cfg.num_tasks = 4;
  const RunData data = load_run_data(cfg);
  const auto rows = run_ablation(cfg, data, 2);
  int prompts = 0, losses = 0;
  std::set<std::uint64_t> eval_seeds, train_seeds;
  for (const auto& r : rows) {
    prompts += r.group == "prompts";
    losses += r.group == "losses";
    eval_seeds.insert(r.eval_seed);
    train_seeds.insert(r.train_seed);
  }
  CHECK(prompts == 4);
  CHECK(losses == 3);
  CHECK(eval_seeds.size() == 1);
  CHECK(train_seeds.size() == 1);

  // The full model appears in both groups; it is trained once and agrees.
  const AblationRow* full_prompt = nullptr;
  const AblationRow* full_loss = nullptr;
  for (const auto& r : rows) {
    if (r.group == "prompts" && r.domain_prompts && r.task_prompts) full_prompt = &r;
    if (r.group == "losses" && r.use_ld && r.use_lf) full_loss = &r;
  }
  REQUIRE(full_prompt != nullptr);
  REQUIRE(full_loss != nullptr);
  CHECK(full_prompt->config_digest == full_loss->config_digest);
  CHECK(full_prompt->accuracy.mean == full_loss->accuracy.mean);

  const auto j = nlohmann::json::parse(ablation_json(cfg, rows));
  CHECK(j["rows"].size() == rows.size());
  const std::string csv = ablation_csv(rows);
  CHECK(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')) == rows.size() + 1);
}
