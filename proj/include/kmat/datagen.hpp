#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kmat/errors.hpp"
#include "kmat/prompt_space.hpp"
#include "kmat/rng.hpp"

namespace kmat {

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    default: return "test";
  }
}

struct EmbeddingRecord {
  Eigen::VectorXd x;  // unit norm
  int label = 0;
  Modality modality = Modality::kHigh;
  Split split = Split::kTrain;
};

// In-memory embedding corpus. Every record is validated on insertion: the
// declared dimension, a label inside [0, n_classes), and unit norm to 1e-6.
class LabeledEmbeddingSet {
 public:
  LabeledEmbeddingSet(int dim, int n_classes) : dim_(dim), n_classes_(n_classes) {
    if (dim < 1) throw ConfigError("embedding dimension must be positive");
    if (n_classes < 1) throw ConfigError("class count must be positive");
  }

  void add(EmbeddingRecord rec) {
    if (rec.x.size() != dim_) {
      throw ShapeError("record dimension " + std::to_string(rec.x.size()) +
                       " does not match the set dimension " + std::to_string(dim_));
    }
    if (rec.label < 0 || rec.label >= n_classes_) {
      throw DataError("record label " + std::to_string(rec.label) + " out of range");
    }
    if (!rec.x.allFinite()) throw DataError("record has a non-finite entry");
    if (std::abs(rec.x.norm() - 1.0) > 1e-6) {
      throw DataError("record embeddings must be unit-norm");
    }
    records_.push_back(std::move(rec));
  }

  int dim() const { return dim_; }
  int n_classes() const { return n_classes_; }
  std::size_t size() const { return records_.size(); }
  const std::vector<EmbeddingRecord>& records() const { return records_; }

  bool contains(Modality m) const {
    for (const auto& r : records_) {
      if (r.modality == m) return true;
    }
    return false;
  }

  std::size_t count(int label, Modality m, Split s) const {
    std::size_t n = 0;
    for (const auto& r : records_) {
      if (r.label == label && r.modality == m && r.split == s) ++n;
    }
    return n;
  }

  LabeledEmbeddingSet filter(std::optional<Modality> m, std::optional<Split> s) const {
    LabeledEmbeddingSet out(dim_, n_classes_);
    for (const auto& r : records_) {
      if (m && r.modality != *m) continue;
      if (s && r.split != *s) continue;
      out.records_.push_back(r);
    }
    return out;
  }

  // Materialized feature matrix plus labels for one (modality, split) slice.
  std::pair<Eigen::MatrixXd, std::vector<int>> matrix(Modality m, Split s) const {
    std::vector<const EmbeddingRecord*> picked;
    for (const auto& r : records_) {
      if (r.modality == m && r.split == s) picked.push_back(&r);
    }
    Eigen::MatrixXd x(static_cast<Eigen::Index>(picked.size()), dim_);
    std::vector<int> y(picked.size());
    for (std::size_t i = 0; i < picked.size(); ++i) {
      x.row(static_cast<Eigen::Index>(i)) = picked[i]->x;
      y[i] = picked[i]->label;
    }
    return {std::move(x), std::move(y)};
  }

 private:
  int dim_;
  int n_classes_;
  std::vector<EmbeddingRecord> records_;
};

// Recipe for the synthetic two-modality corpus. High-end samples scatter
// around unit class centers; low-end samples scatter around the same centers
// pushed through a fixed in-plane rotation plus a shared offset direction,
// mimicking a systematic cross-modality shift.
struct SyntheticSpec {
  int n_classes = 3;
  int embed_dim = 32;
  int train_per_class = 100;  // per modality
  int val_per_class = 20;
  int test_per_class = 50;
  double center_spread = M_PI / 2;   // angle between the shared mean direction and each center
  double noise = 0.15;               // isotropic sample noise before re-normalization
  double cross_modal_rotation = 0.6; // radians, applied in the plane of the first two centers
  double shortcut_offset = 0.5;      // magnitude of the shared low-end offset
  std::uint64_t seed = 0;

  void validate() const {
    if (n_classes < 2) throw ConfigError("gen.n_classes must be at least 2");
    if (embed_dim < n_classes) {
      throw ConfigError("gen.embed_dim must be at least the class count");
    }
    if (train_per_class < 0 || val_per_class < 0 || test_per_class < 0) {
      throw ConfigError("gen per-class counts must be non-negative");
    }
    if (train_per_class + val_per_class + test_per_class < 1) {
      throw ConfigError("gen requires at least one sample per class");
    }
    if (noise < 0.0) throw ConfigError("gen.noise must be non-negative");
    if (!(center_spread > 0.0)) throw ConfigError("gen.center_spread must be positive");
    if (shortcut_offset < 0.0) throw ConfigError("gen.shortcut_offset must be non-negative");
  }
};

struct SyntheticData {
  LabeledEmbeddingSet set;
  AnchorPrototypes truth;  // noiseless class directions per modality
};

namespace detail {

inline Eigen::VectorXd normalized_or_throw(Eigen::VectorXd v, const char* what) {
  const double n = v.norm();
  if (!(n >= kDegenerateNorm)) {
    throw NumericError(std::string(what) + " collapsed below the normalization guard");
  }
  return v / n;
}

inline Eigen::VectorXd gaussian_vector(Rng& rng, int dim) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v[i] = rng.gaussian();
  return v;
}

}  // namespace detail

// Deterministic synthetic corpus. Draw order (fixed): orthonormal class
// frame, offset direction, then samples class-major / modality (high first) /
// split (train, val, test) / index. Noise draws are skipped entirely when
// noise == 0 so the noiseless corpus is exact.
inline SyntheticData generate(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const int k = spec.n_classes;
  const int d = spec.embed_dim;

  // Random orthonormal frame, one direction per class.
  std::vector<Eigen::VectorXd> frame;
  while (static_cast<int>(frame.size()) < k) {
    Eigen::VectorXd v = detail::gaussian_vector(rng, d);
    for (const auto& u : frame) v -= v.dot(u) * u;
    if (v.norm() < 1e-9) continue;  // essentially impossible; redraw keeps the stream defined
    frame.push_back(v / v.norm());
  }
  Eigen::VectorXd mean_dir = frame[0];
  for (int i = 1; i < k; ++i) mean_dir += frame[i];
  mean_dir = detail::normalized_or_throw(mean_dir, "class frame mean");

  Eigen::MatrixXd centers(k, d);
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd e =
        detail::normalized_or_throw(frame[static_cast<std::size_t>(i)] -
                                        frame[static_cast<std::size_t>(i)].dot(mean_dir) * mean_dir,
                                    "class direction");
    centers.row(i) = std::cos(spec.center_spread) * mean_dir + std::sin(spec.center_spread) * e;
  }

  // Rotation plane spanned by the first two centers (falls back to the mean
  // direction when they are collinear, e.g. two antipodal classes).
  const Eigen::VectorXd a = centers.row(0);
  Eigen::VectorXd b = centers.row(1).transpose() - centers.row(1).dot(a) * a;
  b = b.norm() >= 1e-9 ? Eigen::VectorXd(b / b.norm()) : mean_dir;
  const double phi = spec.cross_modal_rotation;
  auto rotate = [&](const Eigen::VectorXd& x) {
    const double xa = x.dot(a);
    const double xb = x.dot(b);
    return Eigen::VectorXd(x + (std::cos(phi) - 1.0) * (xa * a + xb * b) +
                           std::sin(phi) * (xa * b - xb * a));
  };

  const Eigen::VectorXd offset_dir =
      detail::normalized_or_throw(detail::gaussian_vector(rng, d), "offset direction");

  SyntheticData out{LabeledEmbeddingSet(d, k), {}};
  out.truth.high = centers;
  out.truth.low.resize(k, d);
  for (int i = 0; i < k; ++i) {
    out.truth.low.row(i) = detail::normalized_or_throw(
        rotate(centers.row(i)) + spec.shortcut_offset * offset_dir, "low-end center");
  }

  const std::pair<Split, int> splits[] = {{Split::kTrain, spec.train_per_class},
                                          {Split::kVal, spec.val_per_class},
                                          {Split::kTest, spec.test_per_class}};
  for (int c = 0; c < k; ++c) {
    for (Modality m : {Modality::kHigh, Modality::kLow}) {
      const Eigen::VectorXd base = m == Modality::kHigh ? out.truth.high.row(c) : out.truth.low.row(c);
      for (const auto& [split, count] : splits) {
        for (int s = 0; s < count; ++s) {
          Eigen::VectorXd x = base;
          if (spec.noise > 0.0) x += spec.noise * detail::gaussian_vector(rng, d);
          out.set.add({detail::normalized_or_throw(std::move(x), "sample"), c, m, split});
        }
      }
    }
  }
  return out;
}

// Noisy unit directions around each ground-truth prototype; stands in for a
// bank of per-class textual descriptions already pushed through an encoder.
inline DescriptionSet synthesize_descriptions(const AnchorPrototypes& truth, int per_class,
                                              double noise, std::uint64_t seed) {
  if (per_class < 1) throw ConfigError("descriptions per class must be at least 1");
  if (noise < 0.0) throw ConfigError("description noise must be non-negative");
  Rng rng(seed);
  const int k = static_cast<int>(truth.high.rows());
  const int d = static_cast<int>(truth.high.cols());
  DescriptionSet out;
  for (Modality m : {Modality::kHigh, Modality::kLow}) {
    auto& dest = m == Modality::kHigh ? out.high : out.low;
    const auto& rows = truth.rows(m);
    dest.reserve(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
      Eigen::MatrixXd descs(per_class, d);
      for (int r = 0; r < per_class; ++r) {
        Eigen::VectorXd x = rows.row(c);
        if (noise > 0.0) x += noise * detail::gaussian_vector(rng, d);
        descs.row(r) = detail::normalized_or_throw(std::move(x), "description");
      }
      dest.push_back(std::move(descs));
    }
  }
  return out;
}

// Descriptions ride in the regular fixture format; the split column is
// meaningless for them and written as "train".
inline LabeledEmbeddingSet to_embedding_set(const DescriptionSet& descriptions) {
  if (descriptions.high.empty() || descriptions.high[0].rows() == 0) {
    throw DataError("description set is empty");
  }
  const int k = static_cast<int>(descriptions.high.size());
  const int d = static_cast<int>(descriptions.high[0].cols());
  LabeledEmbeddingSet out(d, k);
  for (Modality m : {Modality::kHigh, Modality::kLow}) {
    const auto& per_class = m == Modality::kHigh ? descriptions.high : descriptions.low;
    if (static_cast<int>(per_class.size()) != k) {
      throw ShapeError("description modalities disagree on the class count");
    }
    for (int c = 0; c < k; ++c) {
      for (Eigen::Index r = 0; r < per_class[static_cast<std::size_t>(c)].rows(); ++r) {
        out.add({per_class[static_cast<std::size_t>(c)].row(r), c, m, Split::kTrain});
      }
    }
  }
  return out;
}

inline DescriptionSet descriptions_from_set(const LabeledEmbeddingSet& set) {
  DescriptionSet out;
  const int k = set.n_classes();
  for (Modality m : {Modality::kHigh, Modality::kLow}) {
    auto& dest = m == Modality::kHigh ? out.high : out.low;
    for (int c = 0; c < k; ++c) {
      std::vector<const EmbeddingRecord*> rows;
      for (const auto& r : set.records()) {
        if (r.label == c && r.modality == m) rows.push_back(&r);
      }
      Eigen::MatrixXd descs(static_cast<Eigen::Index>(rows.size()), set.dim());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        descs.row(static_cast<Eigen::Index>(i)) = rows[i]->x;
      }
      dest.push_back(std::move(descs));
    }
  }
  return out;
}

// ---- fixture file format ----
// Line 1:  dim=<d> classes=<k>
// Rows:    label,modality,split,v1,...,vd   with modality H|L, split train|val|test.
// Values are written with enough digits to round-trip exactly; rows are
// re-validated on load (unit norm within 1e-4, then re-normalized).

inline void save_embeddings(const LabeledEmbeddingSet& set, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out << "dim=" << set.dim() << " classes=" << set.n_classes() << "\n";
  char buf[40];
  for (const auto& r : set.records()) {
    out << r.label << ',' << (r.modality == Modality::kHigh ? 'H' : 'L') << ','
        << split_name(r.split);
    for (int i = 0; i < r.x.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", r.x[i]);
      out << ',' << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("failed while writing '" + path + "'");
}

inline LabeledEmbeddingSet load_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  std::string line;
  int line_no = 1;
  if (!std::getline(in, line)) throw FormatError("missing header", 1);
  int dim = 0, classes = 0;
  if (std::sscanf(line.c_str(), "dim=%d classes=%d", &dim, &classes) != 2) {
    throw FormatError("header must be 'dim=<d> classes=<k>'", 1);
  }
  if (dim < 1 || classes < 1) throw FormatError("header dimensions must be positive", 1);

  LabeledEmbeddingSet set(dim, classes);
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (static_cast<int>(fields.size()) != 3 + dim) {
      throw FormatError("expected " + std::to_string(3 + dim) + " fields, found " +
                        std::to_string(fields.size()), line_no);
    }
    EmbeddingRecord rec;
    try {
      std::size_t used = 0;
      rec.label = std::stoi(fields[0], &used);
      if (used != fields[0].size()) throw std::invalid_argument("label");
    } catch (const std::exception&) {
      throw FormatError("bad label '" + fields[0] + "'", line_no);
    }
    if (fields[1] == "H") {
      rec.modality = Modality::kHigh;
    } else if (fields[1] == "L") {
      rec.modality = Modality::kLow;
    } else {
      throw FormatError("bad modality '" + fields[1] + "' (want H or L)", line_no);
    }
    if (fields[2] == "train") {
      rec.split = Split::kTrain;
    } else if (fields[2] == "val") {
      rec.split = Split::kVal;
    } else if (fields[2] == "test") {
      rec.split = Split::kTest;
    } else {
      throw FormatError("bad split '" + fields[2] + "' (want train, val or test)", line_no);
    }
    rec.x.resize(dim);
    for (int i = 0; i < dim; ++i) {
      const std::string& tok = fields[static_cast<std::size_t>(3 + i)];
      char* end = nullptr;
      rec.x[i] = std::strtod(tok.c_str(), &end);
      if (end != tok.c_str() + tok.size() || tok.empty()) {
        throw FormatError("bad value '" + tok + "'", line_no);
      }
    }
    const double nrm = rec.x.norm();
    if (std::abs(nrm - 1.0) > 1e-4) {
      throw FormatError("row norm deviates from 1 by more than 1e-4", line_no);
    }
    rec.x /= nrm;
    try {
      set.add(std::move(rec));
    } catch (const Error& e) {
      throw FormatError(e.what(), line_no);
    }
  }
  return set;
}

}  // namespace kmat
