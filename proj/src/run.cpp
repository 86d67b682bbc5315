#include "e2mpl/run.hpp"

#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "e2mpl/rng.hpp"

namespace e2mpl {

namespace {

using Json = nlohmann::ordered_json;

Json stats_json(const AccuracyStats& s) {
  return Json{{"mean", s.mean}, {"variance", s.variance}, {"median", s.median},
              {"q1", s.q1},     {"q3", s.q3},             {"iqr", s.iqr}};
}

std::string fmt_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

RunSeeds RunSeeds::from(std::uint64_t master) {
  return {derive_seed(master, "backbone"), derive_seed(master, "init"), derive_seed(master, "eval")};
}

TrainedModel train_model(const RunConfig& config, const RunData& data) {
  const RunSeeds seeds = RunSeeds::from(config.seed);
  TrainedModel out;
  out.model = config.model();
  out.backbone = FrozenBackbone::create(out.model, seeds.backbone);
  out.initial = init_params(out.model, seeds.init);
  TrainData td{&data.source, &data.target, data.split.train_classes, data.split.val_classes};
  out.result = meta_train(out.initial, out.backbone, out.model, td, config.training(), config.seed);
  out.result.history.config_digest = config.digest();
  return out;
}

EvalReport evaluate_model(const RunConfig& config, const RunData& data, const PromptParams& params,
                          const FrozenBackbone& backbone, int workers) {
  EvalOptions options = config.evaluation();
  options.workers = workers;
  return evaluate_suite(params, backbone, config.model(), data.source, data.target, data.split.test_classes,
                        options, RunSeeds::from(config.seed).eval);
}

Checkpoint make_checkpoint(const RunConfig& config, const TrainedModel& trained) {
  Checkpoint ckpt;
  ckpt.config_digest = config.digest();
  ckpt.config_text = config.canonical_text();
  ckpt.backbone_seed = trained.backbone.seed;
  ckpt.params = trained.result.params;
  ckpt.adam_m = trained.result.adam.m;
  ckpt.adam_v = trained.result.adam.v;
  ckpt.adam_step = trained.result.adam.step;
  return ckpt;
}

void check_compatible(const RunConfig& config, const Checkpoint& ckpt) {
  const PromptParams like = init_params(config.model(), 0);
  std::vector<std::pair<std::string, std::pair<Eigen::Index, Eigen::Index>>> want;
  like.for_each([&want](const char* name, const Matrix& m) { want.push_back({name, {m.rows(), m.cols()}}); });
  std::size_t i = 0;
  ckpt.params.for_each([&](const char* name, const Matrix& m) {
    const auto& shape = want[i++].second;
    if (shape.first != m.rows() || shape.second != m.cols()) {
      throw CheckpointError("checkpoint tensor " + std::string(name) + " is " + std::to_string(m.rows()) + "x" +
                            std::to_string(m.cols()) + ", config expects " + std::to_string(shape.first) + "x" +
                            std::to_string(shape.second));
    }
  });
}

std::string history_ndjson(const TrainHistory& history) {
  std::string out = Json{{"record", "run"}, {"config_digest", history.config_digest}, {"seed", history.seed}}.dump();
  out += '\n';
  for (const auto& r : history.records) {
    out += Json{{"episode", r.episode},
                {"L_c", r.losses.l_c},
                {"L_d", r.losses.l_d},
                {"L_f", r.losses.l_f},
                {"total", r.losses.total},
                {"skipped", r.skipped}}
               .dump();
    out += '\n';
  }
  return out;
}

std::string timing_ndjson(const TrainHistory& history) {
  std::string out;
  for (const auto& r : history.records) {
    out += Json{{"episode", r.episode}, {"millis", r.millis}}.dump();
    out += '\n';
  }
  return out;
}

std::string eval_json(const RunConfig& config, const EvalReport& report, const std::string& params_fingerprint) {
  bool contract = true;
  for (const auto& t : report.tasks) contract = contract && t.solve_count == 2 && t.optimizer_steps == 0;
  if (config.disable_adapter) {
    contract = true;
    for (const auto& t : report.tasks) contract = contract && t.solve_count == 1 && t.optimizer_steps == 0;
  }
  Json j{{"config_digest", config.digest()},
         {"seed", config.seed},
         {"eval_seed", RunSeeds::from(config.seed).eval},
         {"params_fingerprint", params_fingerprint},
         {"num_tasks", report.tasks.size()},
         {"way_count", config.way_count},
         {"shot_count", config.shot_count},
         {"query_count", config.query_count},
         {"accuracy", stats_json(report.accuracy)},
         {"solve_contract_ok", contract}};
  return j.dump(2) + "\n";
}

std::string eval_timing_json(const RunConfig& config, const EvalReport& report) {
  Json per_task = Json::array();
  for (const auto& t : report.tasks) per_task.push_back(t.adapt_millis);
  Json j{{"config_digest", config.digest()},
         {"seed", config.seed},
         {"mean_adapt_millis", report.mean_adapt_millis},
         {"max_adapt_millis", report.max_adapt_millis},
         {"adapt_millis", per_task}};
  return j.dump(2) + "\n";
}

std::string tasks_csv(const EvalReport& report) {
  std::string out = "task_id,accuracy,correct,total,solve_count\n";
  for (const auto& t : report.tasks) {
    out += std::to_string(t.task_id) + "," + fmt_double(t.accuracy) + "," + std::to_string(t.correct) + "," +
           std::to_string(t.total) + "," + std::to_string(t.solve_count) + "\n";
  }
  return out;
}

std::vector<AblationRow> run_ablation(const RunConfig& base, const RunData& data, int workers) {
  struct Cell {
    const char* group;
    const char* name;
    bool dsp, tsp, ld, lf, adapter;
  };
  const Cell cells[] = {
      {"prompts", "domain+task", true, true, true, true, true},
      {"prompts", "domain only", true, false, true, true, true},
      {"prompts", "task only", false, true, true, true, true},
      {"prompts", "none", false, false, true, true, true},
      {"losses", "L_c", true, true, false, false, true},
      {"losses", "L_c+L_d", true, true, true, false, true},
      {"losses", "L_c+L_d+L_f", true, true, true, true, true},
      {"adapter", "no adapter", true, true, true, true, false},
  };

  std::map<std::string, AccuracyStats> done;
  std::vector<AblationRow> rows;
  for (const Cell& c : cells) {
    RunConfig cfg = base;
    cfg.disable_prompts = false;
    cfg.disable_domain_prompts = base.disable_domain_prompts || !c.dsp;
    cfg.disable_task_prompts = base.disable_task_prompts || !c.tsp;
    cfg.disable_ld = base.disable_ld || !c.ld;
    cfg.disable_lf = base.disable_lf || !c.lf;
    cfg.disable_adapter = base.disable_adapter || !c.adapter;

    AblationRow row;
    row.group = c.group;
    row.cell = c.name;
    row.domain_prompts = !cfg.disable_domain_prompts;
    row.task_prompts = !cfg.disable_task_prompts;
    row.use_ld = !cfg.disable_ld;
    row.use_lf = !cfg.disable_lf;
    row.adapter = !cfg.disable_adapter;
    row.config_digest = cfg.digest();
    row.train_seed = cfg.seed;
    row.eval_seed = RunSeeds::from(cfg.seed).eval;

    const auto hit = done.find(row.config_digest);
    if (hit != done.end()) {
      row.accuracy = hit->second;
    } else {
      const TrainedModel trained = train_model(cfg, data);
      row.accuracy = evaluate_model(cfg, data, trained.result.params, trained.backbone, workers).accuracy;
      done.emplace(row.config_digest, row.accuracy);
    }
    rows.push_back(row);
  }
  return rows;
}

std::string ablation_json(const RunConfig& base, const std::vector<AblationRow>& rows) {
  Json list = Json::array();
  for (const auto& r : rows) {
    list.push_back(Json{{"group", r.group},
                        {"cell", r.cell},
                        {"domain_prompts", r.domain_prompts},
                        {"task_prompts", r.task_prompts},
                        {"L_d", r.use_ld},
                        {"L_f", r.use_lf},
                        {"adapter", r.adapter},
                        {"config_digest", r.config_digest},
                        {"train_seed", r.train_seed},
                        {"eval_seed", r.eval_seed},
                        {"accuracy", stats_json(r.accuracy)}});
  }
  Json j{{"config_digest", base.digest()}, {"seed", base.seed}, {"rows", list}};
  return j.dump(2) + "\n";
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out =
      "group,cell,domain_prompts,task_prompts,L_d,L_f,adapter,train_seed,eval_seed,mean,variance,median,q1,q3,iqr,"
      "config_digest\n";
  auto b = [](bool v) { return std::string(v ? "1" : "0"); };
  for (const auto& r : rows) {
    out += r.group + "," + r.cell + "," + b(r.domain_prompts) + "," + b(r.task_prompts) + "," + b(r.use_ld) + "," +
           b(r.use_lf) + "," + b(r.adapter) + "," + std::to_string(r.train_seed) + "," +
           std::to_string(r.eval_seed) + "," + fmt_double(r.accuracy.mean) + "," + fmt_double(r.accuracy.variance) +
           "," + fmt_double(r.accuracy.median) + "," + fmt_double(r.accuracy.q1) + "," + fmt_double(r.accuracy.q3) +
           "," + fmt_double(r.accuracy.iqr) + "," + r.config_digest + "\n";
  }
  return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace e2mpl
