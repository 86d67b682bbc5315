#include "e2mpl/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <variant>

#include "e2mpl/digest.hpp"

namespace e2mpl {

namespace {

using Member = std::variant<int RunConfig::*, double RunConfig::*, bool RunConfig::*, std::string RunConfig::*,
                            std::uint64_t RunConfig::*>;

const std::map<std::string, Member, std::less<>>& fields() {
  static const std::map<std::string, Member, std::less<>> table = {
      {"seed", &RunConfig::seed},
      {"data_source", &RunConfig::data_source},
      {"source_path", &RunConfig::source_path},
      {"target_path", &RunConfig::target_path},
      {"num_classes", &RunConfig::num_classes},
      {"per_class", &RunConfig::per_class},
      {"class_separation", &RunConfig::class_separation},
      {"within_sigma", &RunConfig::within_sigma},
      {"signal_dims", &RunConfig::signal_dims},
      {"nuisance_scale", &RunConfig::nuisance_scale},
      {"nuisance_dims", &RunConfig::nuisance_dims},
      {"shared_offset", &RunConfig::shared_offset},
      {"rotation_angle", &RunConfig::rotation_angle},
      {"rotation_seed", &RunConfig::rotation_seed},
      {"translation", &RunConfig::translation},
      {"target_noise", &RunConfig::target_noise},
      {"train_classes", &RunConfig::train_classes},
      {"val_classes", &RunConfig::val_classes},
      {"test_classes", &RunConfig::test_classes},
      {"shuffle_labels", &RunConfig::shuffle_labels},
      {"raw_dim", &RunConfig::raw_dim},
      {"token_dim", &RunConfig::token_dim},
      {"n_dsp", &RunConfig::n_dsp},
      {"n_tsp", &RunConfig::n_tsp},
      {"n_img", &RunConfig::n_img},
      {"backbone_hidden", &RunConfig::backbone_hidden},
      {"backbone_out", &RunConfig::backbone_out},
      {"head_out", &RunConfig::head_out},
      {"gamma_w_init", &RunConfig::gamma_w_init},
      {"gamma_p_init", &RunConfig::gamma_p_init},
      {"lambda_s_init", &RunConfig::lambda_s_init},
      {"train_cls_token", &RunConfig::train_cls_token},
      {"way_count", &RunConfig::way_count},
      {"shot_count", &RunConfig::shot_count},
      {"query_count", &RunConfig::query_count},
      {"epochs", &RunConfig::epochs},
      {"episodes_per_epoch", &RunConfig::episodes_per_epoch},
      {"learning_rate", &RunConfig::learning_rate},
      {"adam_beta1", &RunConfig::adam_beta1},
      {"adam_beta2", &RunConfig::adam_beta2},
      {"adam_eps", &RunConfig::adam_eps},
      {"max_consecutive_skips", &RunConfig::max_consecutive_skips},
      {"early_stop", &RunConfig::early_stop},
      {"early_stop_patience", &RunConfig::early_stop_patience},
      {"validate_every", &RunConfig::validate_every},
      {"val_tasks", &RunConfig::val_tasks},
      {"lambda_d", &RunConfig::lambda_d},
      {"lambda_f", &RunConfig::lambda_f},
      {"soft_pseudo_labels", &RunConfig::soft_pseudo_labels},
      {"soft_temperature", &RunConfig::soft_temperature},
      {"lf_after_projection", &RunConfig::lf_after_projection},
      {"sinkhorn_max_iters", &RunConfig::sinkhorn_max_iters},
      {"sinkhorn_tol", &RunConfig::sinkhorn_tol},
      {"disable_prompts", &RunConfig::disable_prompts},
      {"disable_domain_prompts", &RunConfig::disable_domain_prompts},
      {"disable_task_prompts", &RunConfig::disable_task_prompts},
      {"disable_adapter", &RunConfig::disable_adapter},
      {"disable_lf", &RunConfig::disable_lf},
      {"disable_ld", &RunConfig::disable_ld},
      {"num_tasks", &RunConfig::num_tasks},
  };
  return table;
}

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size()) {
    throw ConfigError(std::string(key), std::string(key) + ": cannot parse '" + std::string(text) + "'");
  }
  return v;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(std::string(key), std::string(key) + ": expected true or false, got '" + std::string(text) + "'");
}

std::string format_double(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

template <typename T>
void require(bool ok, const char* key, const std::string& rule, T got) {
  if (ok) return;
  std::ostringstream msg;
  msg << key << " " << rule << " (got " << got << ")";
  throw ConfigError(key, msg.str());
}

}  // namespace

void RunConfig::set(std::string_view key, std::string_view value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError(std::string(key), "unknown config key '" + std::string(key) + "'");
  if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
  std::visit(
      [&](auto member) {
        using T = std::remove_reference_t<decltype(this->*member)>;
        if constexpr (std::is_same_v<T, bool>) {
          this->*member = parse_bool(key, value);
        } else if constexpr (std::is_same_v<T, std::string>) {
          this->*member = std::string(value);
        } else {
          this->*member = parse_number<T>(key, value);
        }
      },
      it->second);
}

void RunConfig::validate() const {
  require(data_source == "synthetic" || data_source == "files", "data_source", "must be synthetic or files",
          data_source);
  if (data_source == "files") {
    require(!source_path.empty(), "source_path", "must be set when data_source = files", "''");
    require(!target_path.empty(), "target_path", "must be set when data_source = files", "''");
  } else {
    require(num_classes >= 1, "num_classes", "must be >= 1", num_classes);
    require(per_class >= shot_count + query_count, "per_class", "must be >= shot_count + query_count", per_class);
    require(class_separation >= 0.0, "class_separation", "must be >= 0", class_separation);
    require(within_sigma >= 0.0, "within_sigma", "must be >= 0", within_sigma);
    require(nuisance_scale >= 0.0, "nuisance_scale", "must be >= 0", nuisance_scale);
    require(signal_dims >= 0 && signal_dims <= raw_dim, "signal_dims", "must lie in [0, raw_dim]", signal_dims);
    const int free_dims = signal_dims > 0 && signal_dims < raw_dim ? raw_dim - signal_dims : raw_dim;
    require(nuisance_dims >= 0 && nuisance_dims <= free_dims, "nuisance_dims",
            "must lie in [0, raw_dim - signal_dims]", nuisance_dims);
    require(shared_offset >= 0.0, "shared_offset", "must be >= 0", shared_offset);
    require(target_noise >= 0.0, "target_noise", "must be >= 0", target_noise);
    require(train_classes + val_classes + test_classes == num_classes, "train_classes",
            "+ val_classes + test_classes must equal num_classes", train_classes + val_classes + test_classes);
  }
  require(train_classes >= 1, "train_classes", "must be >= 1", train_classes);
  require(val_classes >= 0, "val_classes", "must be >= 0", val_classes);
  require(test_classes >= 1, "test_classes", "must be >= 1", test_classes);

  require(raw_dim >= 2, "raw_dim", "must be >= 2", raw_dim);
  require(token_dim >= 1, "token_dim", "must be >= 1", token_dim);
  require(n_dsp >= 0, "n_dsp", "must be >= 0", n_dsp);
  require(n_tsp >= 0, "n_tsp", "must be >= 0", n_tsp);
  require(n_img >= 1, "n_img", "must be >= 1", n_img);
  require(backbone_hidden >= 1, "backbone_hidden", "must be >= 1", backbone_hidden);
  require(backbone_out >= 1, "backbone_out", "must be >= 1", backbone_out);
  require(head_out >= 1, "head_out", "must be >= 1", head_out);
  require(gamma_w_init > 0.0, "gamma_w_init", "must be > 0", gamma_w_init);
  require(gamma_p_init > 0.0, "gamma_p_init", "must be > 0", gamma_p_init);
  require(lambda_s_init > 0.0, "lambda_s_init", "must be > 0", lambda_s_init);

  require(way_count >= 2, "way_count", "must be >= 2", way_count);
  require(shot_count >= 1, "shot_count", "must be >= 1", shot_count);
  require(query_count >= 1, "query_count", "must be >= 1", query_count);
  require(way_count <= train_classes, "way_count", "must not exceed train_classes", way_count);
  require(way_count <= test_classes, "way_count", "must not exceed test_classes", way_count);
  if (early_stop) require(way_count <= val_classes, "val_classes", "must be >= way_count with early_stop", val_classes);

  require(epochs >= 0, "epochs", "must be >= 0", epochs);
  require(episodes_per_epoch >= 0, "episodes_per_epoch", "must be >= 0", episodes_per_epoch);
  require(learning_rate > 0.0, "learning_rate", "must be > 0", learning_rate);
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)", adam_beta1);
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)", adam_beta2);
  require(adam_eps > 0.0, "adam_eps", "must be > 0", adam_eps);
  require(max_consecutive_skips >= 0, "max_consecutive_skips", "must be >= 0", max_consecutive_skips);
  require(early_stop_patience >= 1, "early_stop_patience", "must be >= 1", early_stop_patience);
  require(validate_every >= 1, "validate_every", "must be >= 1", validate_every);
  require(val_tasks >= 1, "val_tasks", "must be >= 1", val_tasks);

  require(lambda_d >= 0.0, "lambda_d", "must be >= 0", lambda_d);
  require(lambda_f >= 0.0, "lambda_f", "must be >= 0", lambda_f);
  require(soft_temperature > 0.0, "soft_temperature", "must be > 0", soft_temperature);
  require(sinkhorn_max_iters >= 1, "sinkhorn_max_iters", "must be >= 1", sinkhorn_max_iters);
  require(sinkhorn_tol > 0.0, "sinkhorn_tol", "must be > 0", sinkhorn_tol);
  require(num_tasks >= 1, "num_tasks", "must be >= 1", num_tasks);
}

std::string RunConfig::canonical_text() const {
  std::string out;
  for (const auto& [name, member] : fields()) {
    out += name;
    out += " = ";
    std::visit(
        [&](auto m) {
          using T = std::remove_cvref_t<decltype(this->*m)>;
          if constexpr (std::is_same_v<T, bool>) {
            out += (this->*m) ? "true" : "false";
          } else if constexpr (std::is_same_v<T, std::string>) {
            out += '"' + this->*m + '"';
          } else if constexpr (std::is_same_v<T, double>) {
            out += format_double(this->*m);
          } else {
            out += std::to_string(this->*m);
          }
        },
        member);
    out += '\n';
  }
  return out;
}

std::string RunConfig::digest() const { return sha256_hex(canonical_text()); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const auto& [name, member] : fields()) v.push_back(name);
    return v;
  }();
  return names;
}

PromptNetConfig RunConfig::model() const {
  PromptNetConfig m;
  m.raw_dim = raw_dim;
  m.token_dim = token_dim;
  m.n_dsp = n_dsp;
  m.n_tsp = n_tsp;
  m.n_img = n_img;
  m.backbone_hidden = backbone_hidden;
  m.backbone_out = backbone_out;
  m.head_out = head_out;
  m.gamma_w_init = gamma_w_init;
  m.gamma_p_init = gamma_p_init;
  m.lambda_s_init = lambda_s_init;
  m.train_cls_token = train_cls_token;
  m.use_domain_prompts = !(disable_prompts || disable_domain_prompts);
  m.use_task_prompts = !(disable_prompts || disable_task_prompts);
  return m;
}

ObjectiveOptions RunConfig::objective() const {
  ObjectiveOptions o;
  o.lambda_d = lambda_d;
  o.lambda_f = lambda_f;
  o.disable_adapter = disable_adapter;
  o.disable_ld = disable_ld;
  o.disable_lf = disable_lf;
  o.soft_pseudo_labels = soft_pseudo_labels;
  o.soft_temperature = soft_temperature;
  o.lf_after_projection = lf_after_projection;
  o.sinkhorn.max_iters = sinkhorn_max_iters;
  o.sinkhorn.tol = sinkhorn_tol;
  return o;
}

EvalOptions RunConfig::evaluation() const {
  EvalOptions e;
  e.num_tasks = num_tasks;
  e.spec = {way_count, shot_count, query_count, TargetSampling::EpisodeClasses};
  e.objective = objective();
  return e;
}

TrainOptions RunConfig::training() const {
  TrainOptions t;
  t.epochs = epochs;
  t.episodes_per_epoch = episodes_per_epoch;
  t.spec = {way_count, shot_count, query_count, TargetSampling::SplitClasses};
  t.objective = objective();
  t.adam = {learning_rate, adam_beta1, adam_beta2, adam_eps};
  t.max_consecutive_skips = max_consecutive_skips;
  t.early_stop.enabled = early_stop;
  t.early_stop.patience = early_stop_patience;
  t.early_stop.validate_every = validate_every;
  t.early_stop.eval = evaluation();
  t.early_stop.eval.num_tasks = val_tasks;
  return t;
}

SyntheticSpec RunConfig::synthetic() const {
  SyntheticSpec s;
  s.num_classes = num_classes;
  s.per_class = per_class;
  s.raw_dim = raw_dim;
  s.class_separation = class_separation;
  s.within_sigma = within_sigma;
  s.signal_dims = signal_dims;
  s.nuisance_scale = nuisance_scale;
  s.nuisance_dims = nuisance_dims;
  s.shared_offset = shared_offset;
  s.shift.rotation_seed = rotation_seed;
  s.shift.rotation_angle = rotation_angle;
  s.shift.translation = translation;
  s.shift.noise_sigma = target_noise;
  return s;
}

RunConfig parse_config(std::string_view text, RunConfig base) {
  int line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("", "line " + std::to_string(line_no) + ": expected key = value");
    }
    base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("", "cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::move(base));
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& assignments) {
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw ConfigError("", "override '" + a + "' is not key=value");
    config.set(trim(std::string_view(a).substr(0, eq)), trim(std::string_view(a).substr(eq + 1)));
  }
}

RunData load_run_data(const RunConfig& config) {
  RunData out;
  if (config.data_source == "files") {
    out.source = load_feature_file(config.source_path, DomainTag::Source);
    out.target = load_feature_file(config.target_path, DomainTag::Target);
    if (out.source.raw_dim() != config.raw_dim || out.target.raw_dim() != config.raw_dim) {
      throw ConfigError("raw_dim", "raw_dim " + std::to_string(config.raw_dim) + " does not match feature files (" +
                                       std::to_string(out.source.raw_dim()) + ", " +
                                       std::to_string(out.target.raw_dim()) + ")");
    }
    if (!out.source.has_labels()) throw ConfigError("source_path", "source feature file carries no labels");
  } else {
    auto domains = synth_domains(config.synthetic(), derive_seed(config.seed, "data"));
    out.source = std::move(domains.source);
    out.target = std::move(domains.target);
  }
  if (config.shuffle_labels) {
    if (!out.target.has_labels()) throw ConfigError("shuffle_labels", "shuffle_labels needs a labeled target pool");
    Rng shuffle = make_rng(config.seed, "shuffle");
    out.target = out.target.with_shuffled_labels(shuffle);
  }
  const auto classes = out.source.classes();
  if (static_cast<int>(classes.size()) != config.train_classes + config.val_classes + config.test_classes) {
    throw ConfigError("train_classes", "train_classes + val_classes + test_classes must equal the " +
                                           std::to_string(classes.size()) + " source classes");
  }
  Rng rng = make_rng(config.seed, "split");
  out.split = make_class_split(classes, config.train_classes, config.val_classes, config.test_classes, rng);
  return out;
}

}  // namespace e2mpl
