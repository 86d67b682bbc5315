#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include "e2mpl/episodes.hpp"
#include "e2fv_reader.hpp"
#include "oracles.hpp"

using namespace e2mpl;
using e2fv::Header;
using e2fv::parse_header;
using e2fv::read_le;
namespace fs = std::filesystem;

namespace {

SyntheticDomains small_domains(std::uint64_t seed = 7) {
  SyntheticSpec s;
  s.num_classes = 10;
  s.per_class = 20;
  s.raw_dim = 6;
  s.shift.rotation_angle = 0.4;
  s.shift.translation = 1.0;
  return synth_domains(s, seed);
}

std::vector<std::int64_t> all_classes(int n) {
  std::vector<std::int64_t> c(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) c[static_cast<std::size_t>(i)] = i;
  return c;
}

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "e2mpl_tests";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

}  // namespace

TEST_CASE("episode shapes for 5-way 1-shot with 15 queries") {
  SyntheticSpec s;
  s.num_classes = 8;
  s.per_class = 20;
  s.raw_dim = 4;
  const auto d = synth_domains(s, 1);
  Rng rng(1);
  const auto ep = sample_episode(d.source, d.target, all_classes(8), {5, 1, 15}, rng);
  CHECK(ep.support_src.rows() == 5);
  CHECK(ep.query_src.rows() == 75);
  CHECK(ep.query_tgt.rows() == 75);
  CHECK(ep.support_labels.size() == 5);
  CHECK(ep.query_labels.size() == 75);
  CHECK(ep.way_count == 5);
  CHECK(ep.shot_count == 1);
}

TEST_CASE("degenerate single-class episode") {
  const auto d = small_domains();
  Rng rng(2);
  const auto ep = sample_episode(d.source, d.target, all_classes(10), {1, 1, 1}, rng);
  CHECK(ep.support_src.rows() == 1);
  CHECK(ep.query_src.rows() == 1);
  CHECK(ep.query_tgt.rows() == 1);
  CHECK(ep.support_labels[0] == 0);
  CHECK(ep.query_labels[0] == 0);
}

TEST_CASE("episode invariants") {
  const auto d = small_domains();
  for (int t = 0; t < 50; ++t) {
    Rng rng(static_cast<std::uint64_t>(t));
    const auto ep = sample_episode(d.source, d.target, all_classes(10), {4, 3, 5}, rng);
    const std::set<std::int64_t> sup(ep.support_labels.begin(), ep.support_labels.end());
    const std::set<std::int64_t> que(ep.query_labels.begin(), ep.query_labels.end());
    CHECK(sup == que);
    CHECK(sup == std::set<std::int64_t>{0, 1, 2, 3});
    std::set<int> rows(ep.support_rows.begin(), ep.support_rows.end());
    for (const int r : ep.query_rows) CHECK(rows.insert(r).second);
    // Remapped labels follow the order of `classes`.
    for (std::size_t i = 0; i < ep.support_rows.size(); ++i) {
      CHECK(d.source.labels()[static_cast<std::size_t>(ep.support_rows[i])] ==
            ep.classes[static_cast<std::size_t>(ep.support_labels[i])]);
    }
    CHECK(ep.query_tgt_truth.empty());
  }
}

TEST_CASE("episodes are reproducible from the rng state") {
  const auto d = small_domains();
  Rng a(42), b(42);
  const auto e1 = sample_episode(d.source, d.target, all_classes(10), {5, 2, 3}, a);
  const auto e2 = sample_episode(d.source, d.target, all_classes(10), {5, 2, 3}, b);
  CHECK(e1.support_rows == e2.support_rows);
  CHECK(e1.query_rows == e2.query_rows);
  CHECK(e1.target_rows == e2.target_rows);
  CHECK(e1.support_src == e2.support_src);
}

TEST_CASE("support draws on a 10-sample pool are uniform") {
  // One class with 10 rows: each row is the support with probability 1/10, so
  // two independent states agree with probability exactly 1/10.
  Matrix x = Matrix::Zero(10, 2);
  for (int i = 0; i < 10; ++i) x(i, 0) = i;
  const FeaturePool pool(x, Labels(10, 0), DomainTag::Source);
  const FeaturePool tgt(x, std::nullopt, DomainTag::Target);
  const std::vector<std::int64_t> cls{0};
  constexpr int kDraws = 4000;
  std::vector<int> counts(10, 0);
  std::vector<int> picks;
  for (int t = 0; t < kDraws; ++t) {
    Rng rng = make_rng(5, "test", static_cast<std::uint64_t>(t));
    const auto ep = sample_episode(pool, tgt, cls, {1, 1, 1}, rng);
    ++counts[static_cast<std::size_t>(ep.support_rows[0])];
    picks.push_back(ep.support_rows[0]);
  }
  const double expected = kDraws / 10.0;
  double chi2 = 0.0;
  for (const int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  CHECK(chi2 < 27.88);  // 99.9% quantile of chi-square with 9 dof
  int same = 0;
  for (int t = 0; t + 1 < kDraws; t += 2) same += picks[static_cast<std::size_t>(t)] == picks[static_cast<std::size_t>(t + 1)];
  const double rate = same / (kDraws / 2.0);
  CHECK(rate == doctest::Approx(0.1).epsilon(0.35));
}

TEST_CASE("sampling errors") {
  const auto d = small_domains();
  Rng rng(3);
  CHECK_THROWS_AS(sample_episode(d.source, d.target, all_classes(10), {11, 1, 1}, rng), EpisodeError);
  CHECK_THROWS_AS(sample_episode(d.source, d.target, all_classes(10), {5, 10, 11}, rng), EpisodeError);
  CHECK_THROWS_AS(sample_episode(d.source, d.target, all_classes(10), {0, 1, 1}, rng), EpisodeError);
}

TEST_CASE("meta-test sampling draws target rows from the episode classes") {
  const auto d = small_domains();
  Rng rng(4);
  const auto ep =
      sample_episode(d.source, d.target, all_classes(10), {3, 1, 4, TargetSampling::EpisodeClasses}, rng);
  REQUIRE(ep.query_tgt_truth.size() == 12);
  for (std::size_t i = 0; i < ep.target_rows.size(); ++i) {
    const auto cls = d.target.labels()[static_cast<std::size_t>(ep.target_rows[i])];
    CHECK(cls == ep.classes[static_cast<std::size_t>(ep.query_tgt_truth[i])]);
  }
}

TEST_CASE("class split is disjoint and covers the universe") {
  Rng rng(5);
  const auto classes = all_classes(28);
  const auto split = make_class_split(classes, 20, 2, 6, rng);
  CHECK(split.disjoint());
  std::set<std::int64_t> u;
  for (const auto* part : {&split.train_classes, &split.val_classes, &split.test_classes})
    for (const auto c : *part) u.insert(c);
  CHECK(u.size() == 28);
  CHECK_THROWS_AS(make_class_split(classes, 20, 2, 7, rng), EpisodeError);
}

TEST_CASE("synthetic pools without a shift agree in class means") {
  SyntheticSpec s;
  s.num_classes = 3;
  s.per_class = 400;
  s.raw_dim = 2;
  s.within_sigma = 1.0;
  const auto d = synth_domains(s, 9);
  for (int c = 0; c < 3; ++c) {
    RowVector ms = RowVector::Zero(2), mt = RowVector::Zero(2);
    for (const int r : d.source.class_index().at(c)) ms += d.source.features().row(r);
    for (const int r : d.target.class_index().at(c)) mt += d.target.features().row(r);
    ms /= 400.0;
    mt /= 400.0;
    // Difference of two independent means has standard deviation sigma*sqrt(2/n).
    const double bound = 3.0 * std::sqrt(2.0) / std::sqrt(400.0);
    CHECK(oracle::max_abs(ms - mt) <= bound);
  }
}

TEST_CASE("target means are the rotated source means") {
  SyntheticSpec s;
  s.num_classes = 4;
  s.per_class = 3;
  s.raw_dim = 2;
  s.within_sigma = 0.0;
  s.shift.rotation_angle = std::acos(-1.0) / 2.0;
  const auto d = synth_domains(s, 10);
  // A quarter turn maps e1 to +-e2.
  const Matrix r = d.rotation;
  CHECK(std::abs(r(0, 0)) <= 1e-15);
  CHECK(std::abs(std::abs(r(1, 0)) - 1.0) <= 1e-15);
  CHECK(oracle::max_abs(r * r.transpose() - Matrix::Identity(2, 2)) <= 1e-15);
  for (int c = 0; c < 4; ++c) {
    const RowVector want = d.class_means.row(c) * r.transpose();
    for (const int row : d.target.class_index().at(c)) {
      CHECK(oracle::max_abs(d.target.features().row(row) - want) <= 1e-6 * (1.0 + oracle::max_abs(want)));
    }
  }
}

TEST_CASE("synthetic generation is deterministic") {
  const auto a = small_domains(3);
  const auto b = small_domains(3);
  const auto c = small_domains(4);
  CHECK(a.source.features() == b.source.features());
  CHECK(a.target.features() == b.target.features());
  CHECK(a.source.labels() == b.source.labels());
  CHECK(a.source.features() != c.source.features());
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec s;
  s.raw_dim = 1;
  CHECK_THROWS_AS(synth_domains(s, 0), EpisodeError);
  s.raw_dim = 8;
  s.per_class = 0;
  CHECK_THROWS_AS(synth_domains(s, 0), EpisodeError);
  s.per_class = 4;
  s.signal_dims = 6;
  s.nuisance_dims = 3;
  CHECK_THROWS_AS(synth_domains(s, 0), EpisodeError);
}

TEST_CASE("feature file round trip") {
  Matrix x(3, 4);
  x << 0.5, -1.25, 3.0, 1e-3, 2, 4, 8, 16, -0.1f, 0.2f, 0.3f, 0.4f;
  x = x.cast<float>().cast<double>();
  const FeaturePool pool(x, Labels{0, 1, 1}, DomainTag::Source);
  const auto path = temp_file("roundtrip.e2fv");
  save_feature_file(pool, path);
  const auto back = load_feature_file(path);
  CHECK(back.features() == x);
  CHECK(back.labels() == Labels{0, 1, 1});
  CHECK(back.has_labels());
}

TEST_CASE("feature file header matches an independent reader") {
  const auto d = small_domains();
  const auto path = temp_file("header.e2fv");
  save_feature_file(d.source, path);
  const std::string bytes = read_bytes(path);
  const Header h = parse_header(bytes);
  CHECK(h.magic == "E2FV");
  CHECK(h.version == 1);
  CHECK(h.dtype == 1);
  CHECK(h.has_labels == 1);
  CHECK(h.reserved == 0);
  CHECK(h.rows == 200);
  CHECK(h.dim == 6);
  CHECK(bytes.size() == 28 + 200 * 6 * 4 + 200 * 8);
  // First feature and last label decoded by hand.
  float f0;
  std::memcpy(&f0, bytes.data() + 28, 4);
  CHECK(static_cast<double>(f0) == d.source.features()(0, 0));
  CHECK(read_le<std::int64_t>(bytes, bytes.size() - 8) == d.source.labels().back());
}

TEST_CASE("unlabeled and empty pools") {
  const auto path = temp_file("unlabeled.e2fv");
  const FeaturePool unlabeled(Matrix::Ones(2, 3), std::nullopt, DomainTag::Target);
  save_feature_file(unlabeled, path);
  const std::string bytes = read_bytes(path);
  CHECK(parse_header(bytes).has_labels == 0);
  CHECK(bytes.size() == 28 + 2 * 3 * 4);
  CHECK_FALSE(load_feature_file(path, DomainTag::Target).has_labels());

  const FeaturePool empty(Matrix(0, 5), Labels{}, DomainTag::Source);
  save_feature_file(empty, path);
  const auto back = load_feature_file(path);
  CHECK(back.size() == 0);
  CHECK(back.raw_dim() == 5);
}

TEST_CASE("feature file errors are distinct") {
  const FeaturePool pool(Matrix::Ones(3, 4), Labels{0, 1, 1}, DomainTag::Source);
  const auto good = temp_file("good.e2fv");
  save_feature_file(pool, good);
  const std::string bytes = read_bytes(good);
  const auto bad = temp_file("bad.e2fv");

  auto kind_of = [&](const std::string& content) {
    write_bytes(bad, content);
    try {
      load_feature_file(bad);
    } catch (const FeatureFileError& e) {
      return std::make_pair(e.kind(), std::string(e.what()));
    }
    return std::make_pair(FeatureFileError::Kind::Io, std::string("no error"));
  };

  SUBCASE("bad magic") {
    std::string b = bytes;
    b.replace(0, 4, "XXXX");
    CHECK(kind_of(b).first == FeatureFileError::Kind::BadMagic);
  }
  SUBCASE("version mismatch") {
    std::string b = bytes;
    b[4] = 2;
    CHECK(kind_of(b).first == FeatureFileError::Kind::VersionMismatch);
  }
  SUBCASE("truncated payload reports both byte counts") {
    const std::string b = bytes.substr(0, bytes.size() - 5);
    const auto [kind, what] = kind_of(b);
    CHECK(kind == FeatureFileError::Kind::Truncated);
    const auto expected = 28 + 3 * 4 * 4 + 3 * 8;
    CHECK(what.find("expected " + std::to_string(expected)) != std::string::npos);
    CHECK(what.find("got " + std::to_string(expected - 5)) != std::string::npos);
  }
  SUBCASE("NaN entry") {
    std::string b = bytes;
    const float nan = std::nanf("");
    std::memcpy(b.data() + 28 + 4 * 5, &nan, 4);
    CHECK(kind_of(b).first == FeatureFileError::Kind::NonFinite);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_feature_file(temp_file("absent.e2fv")), FeatureFileError); }
}
