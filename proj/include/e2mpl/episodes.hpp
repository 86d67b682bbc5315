#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "e2mpl/numerics.hpp"
#include "e2mpl/rng.hpp"

namespace e2mpl {

enum class DomainTag : std::uint8_t { Source, Target };

// Label value marking an unlabeled row inside a labeled file.
inline constexpr std::int64_t kUnlabeled = -1;

// Raw feature vectors of one domain. Immutable after construction.
class FeaturePool {
 public:
  FeaturePool() = default;
  // std::nullopt labels means the pool is unlabeled.
  FeaturePool(Matrix features, std::optional<Labels> labels, DomainTag domain);

  const Matrix& features() const { return features_; }
  const Labels& labels() const { return labels_; }
  bool has_labels() const { return has_labels_; }
  DomainTag domain() const { return domain_; }
  Eigen::Index size() const { return features_.rows(); }
  Eigen::Index raw_dim() const { return features_.cols(); }

  // Row indices per class (rows labeled kUnlabeled are excluded).
  const std::map<std::int64_t, std::vector<int>>& class_index() const { return class_index_; }
  std::vector<std::int64_t> classes() const;

  // Copy with labels permuted across rows; used for chance-level controls.
  FeaturePool with_shuffled_labels(Rng& rng) const;

 private:
  Matrix features_;
  Labels labels_;
  bool has_labels_ = false;
  DomainTag domain_ = DomainTag::Source;
  std::map<std::int64_t, std::vector<int>> class_index_;
};

struct ClassSplit {
  std::vector<std::int64_t> train_classes;
  std::vector<std::int64_t> val_classes;
  std::vector<std::int64_t> test_classes;

  bool disjoint() const;
};

ClassSplit make_class_split(std::span<const std::int64_t> classes, int num_train, int num_val,
                            int num_test, Rng& rng);

enum class TargetSampling {
  // Uniform over target rows whose class is in the split (or all rows when
  // the target pool carries no labels). Used for meta-training.
  SplitClasses,
  // N_q rows from each of the episode's classes, with held-out truth kept
  // for scoring. Used for meta-testing.
  EpisodeClasses,
};

struct EpisodeSpec {
  int way_count = 5;
  int shot_count = 1;
  int query_count = 15;
  TargetSampling target_sampling = TargetSampling::SplitClasses;
};

// One N-way K-shot task. Labels are remapped to 0..N-1 in the order of
// `classes`.
struct Episode {
  Matrix support_src;
  Labels support_labels;
  Matrix query_src;
  Labels query_labels;
  Matrix query_tgt;
  // Scoring only: remapped labels of query_tgt when sampled per episode
  // class. Never consumed by training or adaptation.
  Labels query_tgt_truth;

  std::vector<std::int64_t> classes;
  int way_count = 0;
  int shot_count = 0;
  int query_count = 0;

  std::vector<int> support_rows;
  std::vector<int> query_rows;
  std::vector<int> target_rows;
};

class EpisodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

Episode sample_episode(const FeaturePool& src, const FeaturePool& tgt,
                       std::span<const std::int64_t> split_classes, const EpisodeSpec& spec,
                       Rng& rng);

// ------------------------------------------------------------------ synthetic

struct DomainShiftSpec {
  std::uint64_t rotation_seed = 1;
  // Angle applied in every plane of a random orthonormal frame; 0 = identity.
  double rotation_angle = 0.0;
  double translation = 0.0;
  double noise_sigma = 0.0;
};

struct SyntheticSpec {
  int num_classes = 28;
  int per_class = 40;
  int raw_dim = 64;
  double class_separation = 4.0;
  double within_sigma = 1.0;
  // Class means span a random subspace of this dimension; 0 = all of raw_dim.
  int signal_dims = 0;
  // Class-independent variance added along random directions orthogonal to
  // the class subspace, shared by both domains. 0 disables it.
  double nuisance_scale = 0.0;
  int nuisance_dims = 0;
  // Norm of a fixed mean vector added to every sample of both domains.
  double shared_offset = 0.0;
  DomainShiftSpec shift;
};

struct SyntheticDomains {
  FeaturePool source;
  FeaturePool target;
  Matrix class_means;  // num_classes x raw_dim, source domain
  Matrix rotation;     // raw_dim x raw_dim; target = x * rotation^T + translation
  RowVector translation;
};

SyntheticDomains synth_domains(const SyntheticSpec& spec, std::uint64_t seed);

// ------------------------------------------------------------- feature files

class FeatureFileError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, VersionMismatch, BadHeader, Truncated, NonFinite };
  FeatureFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kFeatureMagic[4] = {'E', '2', 'F', 'V'};
inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 4 + 1 + 1 + 2 + 8 + 8;

void save_feature_file(const FeaturePool& pool, const std::filesystem::path& path);
FeaturePool load_feature_file(const std::filesystem::path& path,
                              DomainTag domain = DomainTag::Source);

}  // namespace e2mpl
