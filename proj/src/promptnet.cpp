#include "e2mpl/promptnet.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "e2mpl/digest.hpp"
#include "e2mpl/rng.hpp"

namespace e2mpl {

void PromptNetConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw ShapeError(std::string(name) + " must be >= 1");
  };
  positive(raw_dim, "raw_dim");
  positive(token_dim, "token_dim");
  positive(n_img, "n_img");
  positive(backbone_hidden, "backbone_hidden");
  positive(backbone_out, "backbone_out");
  positive(head_out, "head_out");
  if (n_dsp < 0 || n_tsp < 0) throw ShapeError("prompt token counts must be >= 0");
  if (!(gamma_w_init > 0.0) || !(gamma_p_init > 0.0) || !(lambda_s_init > 0.0)) {
    throw ShapeError("initial gamma_w, gamma_p and lambda_s must be positive");
  }
}

namespace {

Matrix uniform(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

Matrix normal(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

Matrix fan_in_uniform(Eigen::Index fan_in, Eigen::Index fan_out, Rng& rng) {
  return uniform(fan_in, fan_out, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

Matrix scalar(double v) { return Matrix::Constant(1, 1, v); }

void require_raw_dim(const Matrix& x, const PromptNetConfig& config) {
  if (x.cols() != config.raw_dim) {
    throw ShapeError("input has " + std::to_string(x.cols()) + " features, model expects raw_dim " +
                     std::to_string(config.raw_dim));
  }
}

}  // namespace

PromptParams PromptParams::zeros_like() const {
  PromptParams out = *this;
  out.for_each([](const char*, Matrix& m) { m.setZero(); });
  return out;
}

std::size_t PromptParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&n](const char*, const Matrix& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

bool PromptParams::all_finite() const {
  bool ok = true;
  for_each([&ok](const char*, const Matrix& m) { ok = ok && m.allFinite(); });
  return ok;
}

std::string PromptParams::fingerprint() const {
  Fingerprint fp;
  for_each([&fp](const char* name, const Matrix& m) { fp.add(name).add(m); });
  return fp.hex();
}

FrozenBackbone FrozenBackbone::create(const PromptNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "backbone");
  const Eigen::Index d = config.token_dim;
  const Eigen::Index raw = config.raw_dim;
  const Eigen::Index block = static_cast<Eigen::Index>(config.token_count()) * d;
  auto he = [](Eigen::Index fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); };

  FrozenBackbone b;
  b.seed = seed;
  b.cls_token = normal(1, d, 1.0, rng);
  b.lift_w = normal(raw, config.n_img * d, he(raw), rng);
  b.lift_b = normal(1, config.n_img * d, 0.1, rng);
  b.prompt_w1 = normal(raw, d, he(raw), rng);
  b.prompt_b1 = normal(1, d, 0.1, rng);
  b.prompt_w2 = normal(d, config.n_tsp * d, he(d), rng);
  b.prompt_b2 = normal(1, config.n_tsp * d, 0.1, rng);
  b.enc_w1 = normal(block, config.backbone_hidden, he(block), rng);
  b.enc_b1 = normal(1, config.backbone_hidden, 0.1, rng);
  b.enc_w2 = normal(config.backbone_hidden, config.backbone_out, he(config.backbone_hidden), rng);
  b.enc_b2 = normal(1, config.backbone_out, 0.1, rng);
  return b;
}

std::string FrozenBackbone::fingerprint() const {
  Fingerprint fp;
  fp.add(std::to_string(seed));
  for (const Matrix* m : {&cls_token, &lift_w, &lift_b, &prompt_w1, &prompt_b1, &prompt_w2,
                          &prompt_b2, &enc_w1, &enc_b1, &enc_w2, &enc_b2}) {
    fp.add(*m);
  }
  return fp.hex();
}

PromptParams init_params(const PromptNetConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng = make_rng(seed, "init");
  const Eigen::Index d = config.token_dim;
  PromptParams p;
  p.prompts = uniform(config.n_dsp, d, config.n_dsp > 0 ? 1.0 / std::sqrt(config.n_dsp) : 0.0, rng);
  p.dsp_w1 = fan_in_uniform(d, d, rng);
  p.dsp_b1 = Matrix::Zero(1, d);
  p.dsp_w2 = fan_in_uniform(d, d, rng);
  p.dsp_b2 = Matrix::Zero(1, d);
  p.tsp_w1 = fan_in_uniform(d, d, rng);
  p.tsp_b1 = Matrix::Zero(1, d);
  p.tsp_w2 = fan_in_uniform(d, d, rng);
  p.tsp_b2 = Matrix::Zero(1, d);
  p.head_w = fan_in_uniform(config.backbone_out, config.head_out, rng);
  p.head_b = Matrix::Zero(1, config.head_out);
  p.cls_token = Matrix(0, 0);
  if (config.train_cls_token) {
    p.cls_token = FrozenBackbone::create(config, seed).cls_token;
  }
  p.rho_gamma_w = scalar(numerics::inverse_softplus(config.gamma_w_init));
  p.rho_gamma_p = scalar(numerics::inverse_softplus(config.gamma_p_init));
  p.rho_lambda_s = scalar(numerics::inverse_softplus(config.lambda_s_init));
  p.rho_tau = scalar(0.0);
  return p;
}

Matrix generate_task_prompts(const Matrix& x_raw, const FrozenBackbone& backbone,
                             const PromptNetConfig& config) {
  require_raw_dim(x_raw, config);
  const Matrix hidden = ((x_raw * backbone.prompt_w1).rowwise() + backbone.prompt_b1.row(0)).array().tanh();
  return (hidden * backbone.prompt_w2).rowwise() + backbone.prompt_b2.row(0);
}

ParamVars bind(ad::Tape& tape, const PromptParams& params, bool trainable) {
  ParamVars vars;
  // Visit both bundles in lockstep; for_each order is fixed.
  std::vector<const Matrix*> values;
  params.for_each([&values](const char*, const Matrix& m) { values.push_back(&m); });
  std::size_t i = 0;
  vars.for_each([&](const char*, ad::Var& v) {
    const Matrix& m = *values[i++];
    v = trainable ? tape.variable(m) : tape.constant(m);
  });
  return vars;
}

ad::Var embed(ad::Tape& tape, const Matrix& x_raw, const ParamVars& params,
              const FrozenBackbone& backbone, const PromptNetConfig& config) {
  require_raw_dim(x_raw, config);
  const Eigen::Index b = x_raw.rows();
  const Eigen::Index d = config.token_dim;

  ad::Var cls = params.cls_token.value().size() > 0 ? params.cls_token : tape.constant(backbone.cls_token);
  ad::Var cls_slot = ad::broadcast_rows(cls, b);

  ad::Var dsp_slot;
  if (config.use_domain_prompts && config.n_dsp > 0) {
    ad::Var h = ad::tanh(ad::affine(params.prompts, params.dsp_w1, params.dsp_b1));
    ad::Var tokens = ad::affine(h, params.dsp_w2, params.dsp_b2);
    dsp_slot = ad::broadcast_rows(ad::reshape(tokens, 1, config.n_dsp * d), b);
  } else {
    dsp_slot = tape.constant(Matrix::Zero(b, config.n_dsp * d));
  }

  ad::Var tsp_slot;
  if (config.use_task_prompts && config.n_tsp > 0) {
    const Matrix pk = generate_task_prompts(x_raw, backbone, config);
    ad::Var tokens = tape.constant(Eigen::Map<const Matrix>(pk.data(), b * config.n_tsp, d));
    ad::Var h = ad::tanh(ad::affine(tokens, params.tsp_w1, params.tsp_b1));
    ad::Var mapped = ad::affine(h, params.tsp_w2, params.tsp_b2);
    tsp_slot = ad::reshape(mapped, b, config.n_tsp * d);
  } else {
    tsp_slot = tape.constant(Matrix::Zero(b, config.n_tsp * d));
  }

  ad::Var img_slot = tape.constant((x_raw * backbone.lift_w).rowwise() + backbone.lift_b.row(0));

  const ad::Var parts[] = {cls_slot, dsp_slot, tsp_slot, img_slot};
  ad::Var block = ad::hcat(parts);
  ad::Var hidden = ad::tanh(ad::affine(block, tape.constant(backbone.enc_w1), tape.constant(backbone.enc_b1)));
  ad::Var feat = ad::affine(hidden, tape.constant(backbone.enc_w2), tape.constant(backbone.enc_b2));
  return ad::affine(feat, params.head_w, params.head_b);
}

Matrix embed(const Matrix& x_raw, const PromptParams& params, const FrozenBackbone& backbone,
             const PromptNetConfig& config) {
  ad::Tape tape;
  const ParamVars vars = bind(tape, params, false);
  return embed(tape, x_raw, vars, backbone, config).value();
}

// ---------------------------------------------------------------- checkpoint

namespace {

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

void put_string(std::string& buf, const std::string& s) {
  put<std::uint64_t>(buf, s.size());
  buf.append(s);
}

void put_params(std::string& buf, const PromptParams& p) {
  std::uint32_t count = 0;
  p.for_each([&count](const char*, const Matrix&) { ++count; });
  put<std::uint32_t>(buf, count);
  p.for_each([&buf](const char* name, const Matrix& m) {
    put_string(buf, name);
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(m.rows()));
    put<std::uint64_t>(buf, static_cast<std::uint64_t>(m.cols()));
    buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
  });
}

class Reader {
 public:
  explicit Reader(std::string buf) : buf_(std::move(buf)) {}

  void need(std::size_t n) const {
    if (at_ + n > buf_.size()) {
      throw CheckpointError("checkpoint truncated: need " + std::to_string(at_ + n) + " bytes, have " +
                            std::to_string(buf_.size()));
    }
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf_.data() + at_, sizeof(T));
    at_ += sizeof(T);
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = buf_.substr(at_, n);
    at_ += n;
    return s;
  }

  PromptParams get_params() {
    std::map<std::string, Matrix> found;
    const auto count = get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
      const std::string name = get_string();
      const auto rows = get<std::uint64_t>();
      const auto cols = get<std::uint64_t>();
      if (rows > (1u << 24) || cols > (1u << 24)) throw CheckpointError("checkpoint tensor too large: " + name);
      const std::size_t bytes = rows * cols * sizeof(double);
      need(bytes);
      Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      std::memcpy(m.data(), buf_.data() + at_, bytes);
      at_ += bytes;
      found[name] = std::move(m);
    }
    PromptParams p;
    p.for_each([&found](const char* name, Matrix& m) {
      const auto it = found.find(name);
      if (it == found.end()) throw CheckpointError(std::string("checkpoint missing tensor ") + name);
      m = std::move(it->second);
    });
    return p;
  }

  bool done() const { return at_ == buf_.size(); }
  const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
  std::size_t at_ = 0;
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string buf(kCheckpointMagic, 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put_string(buf, ckpt.config_digest);
  put_string(buf, ckpt.config_text);
  put<std::uint64_t>(buf, ckpt.backbone_seed);
  put_params(buf, ckpt.params);
  const bool has_adam = ckpt.adam_m.has_value() && ckpt.adam_v.has_value();
  put<std::uint8_t>(buf, has_adam ? 1 : 0);
  if (has_adam) {
    put<std::int64_t>(buf, ckpt.adam_step);
    put_params(buf, *ckpt.adam_m);
    put_params(buf, *ckpt.adam_v);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  Reader r(std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
  r.need(4);
  if (std::memcmp(r.buffer().data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError(path.string() + ": bad magic, expected E2CK");
  }
  r.get<std::uint32_t>();  // consume magic
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint ckpt;
  ckpt.config_digest = r.get_string();
  ckpt.config_text = r.get_string();
  ckpt.backbone_seed = r.get<std::uint64_t>();
  ckpt.params = r.get_params();
  if (r.get<std::uint8_t>() == 1) {
    ckpt.adam_step = r.get<std::int64_t>();
    ckpt.adam_m = r.get_params();
    ckpt.adam_v = r.get_params();
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes");
  if (!ckpt.params.all_finite()) throw CheckpointError(path.string() + ": non-finite parameter");
  return ckpt;
}

}  // namespace e2mpl
