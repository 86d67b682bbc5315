#include "e2mpl/episodes.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>
#include <set>

namespace e2mpl {

static_assert(std::endian::native == std::endian::little,
              "feature files are written with native little-endian layout");

FeaturePool::FeaturePool(Matrix features, std::optional<Labels> labels, DomainTag domain)
    : features_(std::move(features)), has_labels_(labels.has_value()), domain_(domain) {
  if (labels) {
    labels_ = std::move(*labels);
    if (static_cast<Eigen::Index>(labels_.size()) != features_.rows()) {
      throw EpisodeError("FeaturePool: " + std::to_string(labels_.size()) + " labels for " +
                         std::to_string(features_.rows()) + " rows");
    }
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] == kUnlabeled) continue;
      if (labels_[i] < 0) throw EpisodeError("FeaturePool: negative label");
      class_index_[labels_[i]].push_back(static_cast<int>(i));
    }
  }
}

std::vector<std::int64_t> FeaturePool::classes() const {
  std::vector<std::int64_t> out;
  out.reserve(class_index_.size());
  for (const auto& [c, rows] : class_index_) out.push_back(c);
  return out;
}

FeaturePool FeaturePool::with_shuffled_labels(Rng& rng) const {
  if (!has_labels_) return *this;
  Labels shuffled = labels_;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  return FeaturePool(features_, std::move(shuffled), domain_);
}

bool ClassSplit::disjoint() const {
  std::set<std::int64_t> seen;
  for (const auto* part : {&train_classes, &val_classes, &test_classes}) {
    for (const auto c : *part) {
      if (!seen.insert(c).second) return false;
    }
  }
  return true;
}

ClassSplit make_class_split(std::span<const std::int64_t> classes, int num_train, int num_val,
                            int num_test, Rng& rng) {
  if (num_train < 0 || num_val < 0 || num_test < 0) {
    throw EpisodeError("class split: negative class count");
  }
  const auto wanted = static_cast<std::size_t>(num_train + num_val + num_test);
  if (wanted != classes.size()) {
    throw EpisodeError("class split: " + std::to_string(wanted) + " classes requested but pool has " +
                       std::to_string(classes.size()));
  }
  std::vector<std::int64_t> order(classes.begin(), classes.end());
  std::shuffle(order.begin(), order.end(), rng);
  ClassSplit split;
  auto it = order.begin();
  split.train_classes.assign(it, it + num_train);
  it += num_train;
  split.val_classes.assign(it, it + num_val);
  it += num_val;
  split.test_classes.assign(it, it + num_test);
  for (auto* part : {&split.train_classes, &split.val_classes, &split.test_classes}) {
    std::sort(part->begin(), part->end());
  }
  return split;
}

namespace {

Matrix take_rows(const Matrix& m, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), m.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(rows[i]);
  return out;
}

// First `count` entries of a uniformly random permutation of `rows`.
std::vector<int> draw_without_replacement(std::vector<int> rows, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, rows.size() - 1);
    std::swap(rows[i], rows[pick(rng)]);
  }
  rows.resize(count);
  return rows;
}

}  // namespace

Episode sample_episode(const FeaturePool& src, const FeaturePool& tgt,
                       std::span<const std::int64_t> split_classes, const EpisodeSpec& spec,
                       Rng& rng) {
  const int n = spec.way_count;
  const int k = spec.shot_count;
  const int q = spec.query_count;
  if (n < 1 || k < 1 || q < 1) throw EpisodeError("episode: way, shot and query counts must be >= 1");
  if (!src.has_labels()) throw EpisodeError("episode: source pool must be labeled");
  if (src.raw_dim() != tgt.raw_dim()) throw EpisodeError("episode: source/target raw_dim differ");
  if (static_cast<std::size_t>(n) > split_classes.size()) {
    throw EpisodeError("episode: way count " + std::to_string(n) + " exceeds split size " +
                       std::to_string(split_classes.size()));
  }

  std::vector<int> class_slots(split_classes.size());
  std::iota(class_slots.begin(), class_slots.end(), 0);
  const auto chosen = draw_without_replacement(std::move(class_slots), static_cast<std::size_t>(n), rng);

  Episode ep;
  ep.way_count = n;
  ep.shot_count = k;
  ep.query_count = q;
  for (int label = 0; label < n; ++label) {
    const std::int64_t cls = split_classes[static_cast<std::size_t>(chosen[static_cast<std::size_t>(label)])];
    ep.classes.push_back(cls);
    const auto found = src.class_index().find(cls);
    const std::size_t have = found == src.class_index().end() ? 0 : found->second.size();
    if (have < static_cast<std::size_t>(k + q)) {
      throw EpisodeError("episode: class " + std::to_string(cls) + " has " + std::to_string(have) +
                         " source samples, needs " + std::to_string(k + q));
    }
    const auto rows = draw_without_replacement(found->second, static_cast<std::size_t>(k + q), rng);
    ep.support_rows.insert(ep.support_rows.end(), rows.begin(), rows.begin() + k);
    ep.query_rows.insert(ep.query_rows.end(), rows.begin() + k, rows.end());
    ep.support_labels.insert(ep.support_labels.end(), static_cast<std::size_t>(k), label);
    ep.query_labels.insert(ep.query_labels.end(), static_cast<std::size_t>(q), label);
  }

  const auto target_total = static_cast<std::size_t>(n * q);
  if (spec.target_sampling == TargetSampling::EpisodeClasses) {
    if (!tgt.has_labels()) {
      throw EpisodeError("episode: per-class target sampling needs a labeled target pool");
    }
    for (int label = 0; label < n; ++label) {
      const auto found = tgt.class_index().find(ep.classes[static_cast<std::size_t>(label)]);
      const std::size_t have = found == tgt.class_index().end() ? 0 : found->second.size();
      if (have < static_cast<std::size_t>(q)) {
        throw EpisodeError("episode: target class " + std::to_string(ep.classes[static_cast<std::size_t>(label)]) +
                           " has " + std::to_string(have) + " samples, needs " + std::to_string(q));
      }
      const auto rows = draw_without_replacement(found->second, static_cast<std::size_t>(q), rng);
      ep.target_rows.insert(ep.target_rows.end(), rows.begin(), rows.end());
      ep.query_tgt_truth.insert(ep.query_tgt_truth.end(), static_cast<std::size_t>(q), label);
    }
  } else {
    std::vector<int> candidates;
    if (tgt.has_labels()) {
      for (const auto cls : split_classes) {
        const auto found = tgt.class_index().find(cls);
        if (found != tgt.class_index().end()) {
          candidates.insert(candidates.end(), found->second.begin(), found->second.end());
        }
      }
      std::sort(candidates.begin(), candidates.end());
    } else {
      candidates.resize(static_cast<std::size_t>(tgt.size()));
      std::iota(candidates.begin(), candidates.end(), 0);
    }
    if (candidates.size() < target_total) {
      throw EpisodeError("episode: target pool has " + std::to_string(candidates.size()) +
                         " eligible samples, needs " + std::to_string(target_total));
    }
    ep.target_rows = draw_without_replacement(std::move(candidates), target_total, rng);
  }

  ep.support_src = take_rows(src.features(), ep.support_rows);
  ep.query_src = take_rows(src.features(), ep.query_rows);
  ep.query_tgt = take_rows(tgt.features(), ep.target_rows);
  return ep;
}

// ------------------------------------------------------------------ synthetic

namespace {

Matrix gaussian(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
  }
  return m;
}

// Haar-distributed orthogonal matrix.
Matrix random_orthogonal(Eigen::Index dim, Rng& rng) {
  const Matrix g = gaussian(dim, dim, rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < dim; ++j) {
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q;
}

Matrix round_to_float(const Matrix& m) { return m.cast<float>().cast<double>(); }

}  // namespace

SyntheticDomains synth_domains(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 1 || spec.per_class < 1) {
    throw EpisodeError("synth_domains: class and per-class counts must be >= 1");
  }
  if (spec.raw_dim < 2) throw EpisodeError("synth_domains: raw_dim must be >= 2");
  if (spec.within_sigma < 0.0 || spec.shift.noise_sigma < 0.0 || spec.nuisance_scale < 0.0 ||
      spec.shared_offset < 0.0) {
    throw EpisodeError("synth_domains: negative noise scale");
  }
  if (spec.signal_dims < 0 || spec.signal_dims > spec.raw_dim) {
    throw EpisodeError("synth_domains: signal_dims out of range");
  }
  const int free_dims = spec.signal_dims > 0 && spec.signal_dims < spec.raw_dim ? spec.raw_dim - spec.signal_dims
                                                                                 : spec.raw_dim;
  if (spec.nuisance_dims < 0 || spec.nuisance_dims > free_dims) {
    throw EpisodeError("synth_domains: nuisance_dims out of range");
  }
  const Eigen::Index d = spec.raw_dim;
  const Eigen::Index c = spec.num_classes;
  const Eigen::Index per = spec.per_class;

  const Eigen::Index signal = spec.signal_dims > 0 ? spec.signal_dims : d;
  Rng basis_rng = make_rng(seed, "synth.basis");
  const Matrix basis = random_orthogonal(d, basis_rng);

  Rng mean_rng = make_rng(seed, "synth.means");
  SyntheticDomains out;
  const Matrix coords = gaussian(c, signal, mean_rng) * (spec.class_separation / std::sqrt(static_cast<double>(signal)));
  out.class_means = signal == d ? coords : Matrix(coords * basis.leftCols(signal).transpose());

  // Nuisance directions come after the signal block of the same frame, so
  // they never overlap the class subspace.
  const Eigen::Index nuisance_start = signal == d ? 0 : signal;
  const Matrix nuisance_basis =
      spec.nuisance_dims > 0 ? Matrix(basis.middleCols(nuisance_start, spec.nuisance_dims).transpose()) : Matrix(0, d);

  auto draw_source_like = [&](Rng& rng, Labels& labels) {
    Matrix x = gaussian(c * per, d, rng) * spec.within_sigma;
    labels.resize(static_cast<std::size_t>(c * per));
    for (Eigen::Index cls = 0; cls < c; ++cls) {
      for (Eigen::Index i = 0; i < per; ++i) {
        const Eigen::Index row = cls * per + i;
        x.row(row) += out.class_means.row(cls);
        labels[static_cast<std::size_t>(row)] = cls;
      }
    }
    if (spec.nuisance_dims > 0) {
      x += gaussian(c * per, spec.nuisance_dims, rng) * spec.nuisance_scale * nuisance_basis;
    }
    return x;
  };

  Rng src_rng = make_rng(seed, "synth.source");
  Labels src_labels;
  Matrix src = draw_source_like(src_rng, src_labels);

  // The shift acts inside the class subspace (all of raw space when
  // signal_dims is 0): a rotation by the same angle in every plane of a random
  // frame, then a translation along a random unit direction.
  const Matrix shift_basis = signal == d ? Matrix(Matrix::Identity(d, d)) : Matrix(basis.leftCols(signal));
  Rng shift_rng = make_rng(spec.shift.rotation_seed, "synth.shift");
  const Matrix frame = shift_basis * random_orthogonal(signal, shift_rng);
  Matrix planes = Matrix::Identity(signal, signal);
  const double cs = std::cos(spec.shift.rotation_angle);
  const double sn = std::sin(spec.shift.rotation_angle);
  for (Eigen::Index p = 0; p + 1 < signal; p += 2) {
    planes(p, p) = cs;
    planes(p, p + 1) = -sn;
    planes(p + 1, p) = sn;
    planes(p + 1, p + 1) = cs;
  }
  out.rotation = frame * planes * frame.transpose() + (Matrix::Identity(d, d) - frame * frame.transpose());
  Vector direction = shift_basis * gaussian(signal, 1, shift_rng).col(0);
  direction /= direction.norm();
  out.translation = spec.shift.translation * direction.transpose();

  Rng tgt_rng = make_rng(seed, "synth.target");
  Labels tgt_labels;
  Matrix tgt = draw_source_like(tgt_rng, tgt_labels);
  tgt = tgt * out.rotation.transpose();
  tgt.rowwise() += out.translation;
  if (spec.shift.noise_sigma > 0.0) tgt += gaussian(tgt.rows(), d, tgt_rng) * spec.shift.noise_sigma;

  if (spec.shared_offset > 0.0) {
    Rng offset_rng = make_rng(seed, "synth.offset");
    RowVector offset = gaussian(1, d, offset_rng).row(0);
    offset *= spec.shared_offset / offset.norm();
    src.rowwise() += offset;
    tgt.rowwise() += offset;
  }

  out.source = FeaturePool(round_to_float(src), std::move(src_labels), DomainTag::Source);
  out.target = FeaturePool(round_to_float(tgt), std::move(tgt_labels), DomainTag::Target);
  return out;
}

// ------------------------------------------------------------- feature files

namespace {

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

template <typename T>
T get(const std::string& buf, std::size_t& at) {
  T v;
  std::memcpy(&v, buf.data() + at, sizeof(T));
  at += sizeof(T);
  return v;
}

}  // namespace

void save_feature_file(const FeaturePool& pool, const std::filesystem::path& path) {
  const auto n = static_cast<std::uint64_t>(pool.size());
  const auto d = static_cast<std::uint64_t>(pool.raw_dim());
  std::string buf;
  buf.reserve(kFeatureHeaderBytes + n * d * 4 + (pool.has_labels() ? n * 8 : 0));
  buf.append(kFeatureMagic, 4);
  put<std::uint32_t>(buf, kFeatureVersion);
  put<std::uint8_t>(buf, 1);  // float32
  put<std::uint8_t>(buf, pool.has_labels() ? 1 : 0);
  put<std::uint16_t>(buf, 0);
  put<std::uint64_t>(buf, n);
  put<std::uint64_t>(buf, d);
  const Matrix& x = pool.features();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) put<float>(buf, static_cast<float>(x(i, j)));
  }
  if (pool.has_labels()) {
    for (const auto y : pool.labels()) put<std::int64_t>(buf, y);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FeatureFileError(FeatureFileError::Kind::Io, "cannot open " + path.string() + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw FeatureFileError(FeatureFileError::Kind::Io, "write failed: " + path.string());
}

FeaturePool load_feature_file(const std::filesystem::path& path, DomainTag domain) {
  using Kind = FeatureFileError::Kind;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FeatureFileError(Kind::Io, "cannot open " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();

  if (buf.size() < 4 || std::memcmp(buf.data(), kFeatureMagic, 4) != 0) {
    throw FeatureFileError(Kind::BadMagic, name + ": bad magic, expected E2FV");
  }
  if (buf.size() < kFeatureHeaderBytes) {
    throw FeatureFileError(Kind::Truncated, name + ": truncated header: expected " +
                                                std::to_string(kFeatureHeaderBytes) + " bytes, got " +
                                                std::to_string(buf.size()));
  }
  std::size_t at = 4;
  const auto version = get<std::uint32_t>(buf, at);
  if (version != kFeatureVersion) {
    throw FeatureFileError(Kind::VersionMismatch, name + ": format version " + std::to_string(version) +
                                                      ", expected " + std::to_string(kFeatureVersion));
  }
  const auto dtype = get<std::uint8_t>(buf, at);
  const auto has_labels = get<std::uint8_t>(buf, at);
  const auto reserved = get<std::uint16_t>(buf, at);
  const auto n = get<std::uint64_t>(buf, at);
  const auto d = get<std::uint64_t>(buf, at);
  if (dtype != 1) throw FeatureFileError(Kind::BadHeader, name + ": unsupported dtype code " + std::to_string(dtype));
  if (has_labels > 1) throw FeatureFileError(Kind::BadHeader, name + ": has_labels must be 0 or 1");
  if (reserved != 0) throw FeatureFileError(Kind::BadHeader, name + ": reserved field must be 0");

  // Guard the size arithmetic against absurd headers before multiplying.
  constexpr std::uint64_t kMaxElems = std::uint64_t{1} << 40;
  if (n > kMaxElems || d > kMaxElems || (d != 0 && n > kMaxElems / d)) {
    throw FeatureFileError(Kind::BadHeader, name + ": implausible dimensions");
  }
  const std::uint64_t expected = kFeatureHeaderBytes + n * d * 4 + (has_labels ? n * 8 : 0);
  if (buf.size() < expected) {
    throw FeatureFileError(Kind::Truncated, name + ": truncated payload: expected " + std::to_string(expected) +
                                                " bytes, got " + std::to_string(buf.size()));
  }
  if (buf.size() > expected) {
    throw FeatureFileError(Kind::BadHeader, name + ": " + std::to_string(buf.size() - expected) +
                                                " trailing bytes after payload");
  }

  Matrix x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const float v = get<float>(buf, at);
      if (!std::isfinite(v)) {
        throw FeatureFileError(Kind::NonFinite, name + ": non-finite feature at row " + std::to_string(i) +
                                                    ", column " + std::to_string(j));
      }
      x(i, j) = v;
    }
  }
  std::optional<Labels> labels;
  if (has_labels) {
    labels.emplace(static_cast<std::size_t>(n));
    for (auto& y : *labels) {
      y = get<std::int64_t>(buf, at);
      if (y < kUnlabeled) throw FeatureFileError(Kind::BadHeader, name + ": label below -1");
    }
  }
  return FeaturePool(std::move(x), std::move(labels), domain);
}

}  // namespace e2mpl
