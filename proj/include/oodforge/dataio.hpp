#pragma once

// Labeled embedding datasets, the EMB1 embedding file format and seeded
// synthetic hypersphere data.
//
// EMB1 embedding file layout (byte-exact):
//   "EMB1\n"
//   {"dtype":"f32","n":N,"d":D,"has_labels":B,"name":S,"split":S}\n
//   N*D little-endian float32, row-major
//   N little-endian int32 labels            (only when has_labels)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "oodforge/container.hpp"
#include "oodforge/error.hpp"
#include "oodforge/numerics.hpp"
#include "oodforge/random.hpp"

namespace oodforge {

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw FormatError("unknown split '" + std::string(s) + "'");
}

using Labels = std::vector<int>;

struct LabeledEmbeddings {
  Matrix features;
  std::optional<Labels> labels;
  std::string name;
  Split split = Split::train;

  std::size_t size() const noexcept { return features.rows(); }
  std::size_t dim() const noexcept { return features.cols(); }
  bool has_labels() const noexcept { return labels.has_value(); }

  const Labels& require_labels(std::string_view who) const {
    if (!labels) throw ConfigError(std::string(who) + ": dataset '" + name + "' has no labels");
    return *labels;
  }

  // One more than the largest label.
  std::size_t num_classes() const {
    const auto& y = require_labels("num_classes");
    return y.empty() ? 0 : static_cast<std::size_t>(*std::max_element(y.begin(), y.end())) + 1;
  }

  void validate() const {
    if (features.rows() == 0) throw FormatError("dataset '" + name + "' is empty");
    if (features.cols() == 0) throw FormatError("dataset '" + name + "' has zero dimension");
    if (labels) {
      if (labels->size() != features.rows()) {
        throw FormatError("dataset '" + name + "': label count does not match rows");
      }
      for (int y : *labels)
        if (y < 0) throw FormatError("dataset '" + name + "': negative label");
    }
  }

  friend bool operator==(const LabeledEmbeddings&, const LabeledEmbeddings&) = default;
};

inline std::vector<std::size_t> class_counts(const Labels& y, std::size_t classes) {
  std::vector<std::size_t> counts(classes, 0);
  for (int label : y) {
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ConfigError("label " + std::to_string(label) + " outside [0, " +
                        std::to_string(classes) + ")");
    }
    ++counts[static_cast<std::size_t>(label)];
  }
  return counts;
}

// Applies fn to every row, producing a new feature matrix (labels, name and
// split are carried over).
template <typename Fn>
LabeledEmbeddings map_rows(const LabeledEmbeddings& ds, Fn&& fn) {
  std::vector<double> out;
  std::size_t width = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Vector r = fn(ds.features.row(i));
    if (i == 0) {
      width = r.size();
      out.reserve(width * ds.size());
    } else if (r.size() != width) {
      throw ConfigError("map_rows: ragged output");
    }
    out.insert(out.end(), r.begin(), r.end());
  }
  return {Matrix(ds.size(), width, std::move(out)), ds.labels, ds.name, ds.split};
}

inline LabeledEmbeddings normalize_rows(const LabeledEmbeddings& ds) {
  return map_rows(ds, [](std::span<const double> r) { return l2_normalize(r); });
}

// ---------------------------------------------------------------------------
// EMB1 embedding files

inline std::string encode_emb(const LabeledEmbeddings& ds) {
  ds.validate();
  OrderedJson header;
  header["dtype"] = "f32";
  header["n"] = ds.size();
  header["d"] = ds.dim();
  header["has_labels"] = ds.has_labels();
  header["name"] = ds.name;
  header["split"] = to_string(ds.split);
  std::string body;
  body.reserve(ds.size() * ds.dim() * 4 + (ds.has_labels() ? ds.size() * 4 : 0));
  for (double v : ds.features.data()) detail::put_f32(body, v);
  if (ds.labels) {
    for (int y : *ds.labels) detail::put_i32(body, static_cast<std::int32_t>(y));
  }
  return encode_frame(header, body);
}

inline LabeledEmbeddings decode_emb(std::string_view bytes) {
  Frame f = decode_frame(bytes);
  const auto& h = f.header;
  LabeledEmbeddings ds;
  std::size_t n = 0, d = 0;
  bool has_labels = false;
  try {
    if (h.at("dtype").get<std::string>() != "f32") throw FormatError("EMB1 dtype must be f32");
    n = h.at("n").get<std::size_t>();
    d = h.at("d").get<std::size_t>();
    has_labels = h.at("has_labels").get<bool>();
    ds.name = h.at("name").get<std::string>();
    ds.split = parse_split(h.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed EMB1 header: ") + e.what());
  }
  const std::size_t expected = n * d * 4 + (has_labels ? n * 4 : 0);
  if (f.body.size() != expected) {
    throw LengthError("EMB1 body is " + std::to_string(f.body.size()) + " bytes, header implies " +
                      std::to_string(expected));
  }
  const auto* p = reinterpret_cast<const unsigned char*>(f.body.data());
  std::vector<double> values(n * d);
  for (std::size_t i = 0; i < n * d; ++i) {
    values[i] = detail::get_f32(p + 4 * i);
    if (!std::isfinite(values[i])) throw FormatError("EMB1 body holds a non-finite value");
  }
  ds.features = Matrix(n, d, std::move(values));
  if (has_labels) {
    Labels y(n);
    std::size_t unlabeled = 0;
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = detail::get_i32(p + 4 * (n * d + i));
      if (y[i] == -1) {
        ++unlabeled;
      } else if (y[i] < 0) {
        throw FormatError("EMB1 label " + std::to_string(y[i]) + " is invalid");
      }
    }
    if (unlabeled != 0 && unlabeled != n) {
      throw FormatError("EMB1 file mixes labeled and unlabeled rows");
    }
    if (unlabeled == 0) ds.labels = std::move(y);
  }
  ds.validate();
  return ds;
}

inline void write_emb(const LabeledEmbeddings& ds, const std::filesystem::path& path) {
  write_file_atomic(path, encode_emb(ds));
}

inline LabeledEmbeddings read_emb(const std::filesystem::path& path) {
  return decode_emb(read_file_bytes(path));
}

// ---------------------------------------------------------------------------
// Synthetic hypersphere data

struct SyntheticSpec {
  std::size_t classes = 3;
  std::size_t dim = 8;
  std::size_t per_class = 200;
  double noise_sigma = 0.05;
  double ood_shift = 2.0;
  std::uint64_t seed = 7;

  void validate() const {
    if (classes < 2) throw ConfigError("synthetic spec: classes must be >= 2");
    if (dim < 1) throw ConfigError("synthetic spec: dim must be >= 1");
    if (per_class < 1) throw ConfigError("synthetic spec: per_class must be >= 1");
    if (!(noise_sigma > 0.0)) throw ConfigError("synthetic spec: noise_sigma must be > 0");
    if (!(ood_shift >= 0.0)) throw ConfigError("synthetic spec: ood_shift must be >= 0");
  }
};

struct SyntheticData {
  LabeledEmbeddings id_train;
  LabeledEmbeddings id_test;
  LabeledEmbeddings ood;
};

namespace detail {

inline Vector gaussian_vector(Rng& rng, std::size_t dim) {
  Vector v(dim);
  for (double& x : v) x = rng.normal();
  return v;
}

inline Vector random_unit_vector(Rng& rng, std::size_t dim) {
  for (;;) {
    Vector v = gaussian_vector(rng, dim);
    if (norm2(v) > 1e-12) return l2_normalize(v);
  }
}

// Orthonormal basis (modified Gram-Schmidt) of span{v_i - v_0}.
inline std::vector<Vector> difference_basis(const std::vector<Vector>& points) {
  std::vector<Vector> basis;
  for (std::size_t i = 1; i < points.size(); ++i) {
    Vector u(points[i].size());
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = points[i][k] - points[0][k];
    for (const auto& b : basis) {
      const double c = dot(u, b);
      for (std::size_t k = 0; k < u.size(); ++k) u[k] -= c * b[k];
    }
    const double n = norm2(u);
    if (n > 1e-10) {
      for (double& x : u) x /= n;
      basis.push_back(std::move(u));
    }
  }
  return basis;
}

// A point at Euclidean distance `shift` from every unit vector in `means`.
// The projection p of the origin onto the means' affine hull is equidistant
// (distance R = sqrt(1 - |p|^2)); the centre moves from p along a direction
// u orthogonal to the hull by t = sqrt(shift^2 - R^2). When shift < R, or no
// orthogonal direction exists, the centre is p itself.
inline Vector equidistant_center(const std::vector<Vector>& means, double shift, Rng& rng) {
  const std::size_t dim = means.front().size();
  const auto basis = difference_basis(means);
  Vector p = means.front();
  for (const auto& b : basis) {
    const double c = dot(p, b);
    for (std::size_t k = 0; k < dim; ++k) p[k] -= c * b[k];
  }
  const double radius_sq = std::max(0.0, 1.0 - dot(p, p));

  Vector u = gaussian_vector(rng, dim);
  for (const auto& b : basis) {
    const double c = dot(u, b);
    for (std::size_t k = 0; k < dim; ++k) u[k] -= c * b[k];
  }
  const double un = norm2(u);
  const double t_sq = shift * shift - radius_sq;
  if (un > 1e-10 && t_sq > 0.0) {
    const double t = std::sqrt(t_sq);
    for (std::size_t k = 0; k < dim; ++k) p[k] += t * u[k] / un;
  }
  return p;
}

inline LabeledEmbeddings sample_around(const std::vector<Vector>& centers, std::size_t per_center,
                                       double sigma, Rng& rng, std::string name, Split split,
                                       bool labeled) {
  const std::size_t dim = centers.front().size();
  std::vector<double> data;
  data.reserve(centers.size() * per_center * dim);
  Labels y;
  for (std::size_t c = 0; c < centers.size(); ++c) {
    for (std::size_t i = 0; i < per_center; ++i) {
      Vector x(dim);
      for (std::size_t k = 0; k < dim; ++k) x[k] = centers[c][k] + sigma * rng.normal();
      Vector z = l2_normalize(x);
      data.insert(data.end(), z.begin(), z.end());
      y.push_back(static_cast<int>(c));
    }
  }
  LabeledEmbeddings ds{Matrix(centers.size() * per_center, dim, std::move(data)), std::nullopt,
                       std::move(name), split};
  if (labeled) ds.labels = std::move(y);
  return ds;
}

}  // namespace detail

// Draw order (fixed, part of the reproducibility contract):
//   1. C class means, each a normalized dim-vector of standard normals;
//   2. the OOD direction u (dim standard normals);
//   3. id_train: per_class samples of class 0, then class 1, ...;
//   4. id_test: same layout;
//   5. ood: C * per_class samples around the OOD centre.
// Each sample is l2_normalize(center + noise_sigma * N(0, I)).
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  std::vector<Vector> means;
  means.reserve(spec.classes);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    means.push_back(detail::random_unit_vector(rng, spec.dim));
  }
  const Vector ood_center = detail::equidistant_center(means, spec.ood_shift, rng);

  SyntheticData out;
  out.id_train = detail::sample_around(means, spec.per_class, spec.noise_sigma, rng,
                                       "synthetic-id", Split::train, true);
  out.id_test = detail::sample_around(means, spec.per_class, spec.noise_sigma, rng,
                                      "synthetic-id", Split::test, true);
  out.ood = detail::sample_around({ood_center}, spec.classes * spec.per_class,
                                  spec.noise_sigma, rng, "synthetic-ood", Split::test, false);
  return out;
}

// Overlapping classes. Every class is a pair of antipodal modes
// centre +/- spread * m_c with m_c = normalize(shared * a + r_c), where a is
// one axis common to all classes and r_c is class-specific. All class means
// coincide near the centre. OOD samples form the same antipodal pair along
// a alone, the direction of largest pooled within-class variance, so
// mean/covariance detectors on raw features rate OOD as more typical than
// ID. A nonlinear projection that folds each mode pair together separates
// them.
struct OverlapSpec {
  std::size_t classes = 3;
  std::size_t dim = 8;
  std::size_t per_class = 200;  // split evenly between the two modes
  double noise_sigma = 0.05;
  double spread = 0.8;
  double shared = 2.0;
  std::uint64_t seed = 11;

  void validate() const {
    if (classes < 2) throw ConfigError("overlap spec: classes must be >= 2");
    if (dim < 3) throw ConfigError("overlap spec: dim must be >= 3");
    if (per_class < 2 || per_class % 2 != 0) {
      throw ConfigError("overlap spec: per_class must be even and >= 2");
    }
    if (!(noise_sigma > 0.0)) throw ConfigError("overlap spec: noise_sigma must be > 0");
    if (!(spread > 0.0)) throw ConfigError("overlap spec: spread must be > 0");
    if (!(shared >= 0.0)) throw ConfigError("overlap spec: shared must be >= 0");
  }
};

// Draw order: centre (unit), shared axis a, then C class directions r_c
// (a and r_c are orthogonalised against the centre, r_c also against a),
// then id_train (class-major; per class the + mode block, then the - mode
// block), id_test, and ood (+ block, then - block).
inline SyntheticData generate_overlapping(const OverlapSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Vector center = detail::random_unit_vector(rng, spec.dim);
  const auto orthogonal_unit = [&](std::initializer_list<const Vector*> against) {
    Vector v = detail::gaussian_vector(rng, spec.dim);
    for (const Vector* b : against) {
      const double c = dot(v, *b);
      for (std::size_t k = 0; k < spec.dim; ++k) v[k] -= c * (*b)[k];
    }
    return l2_normalize(v);
  };
  const Vector axis = orthogonal_unit({&center});
  const auto mode_pair = [&](const Vector& m, std::vector<Vector>& out) {
    for (double sign : {1.0, -1.0}) {
      Vector p(spec.dim);
      for (std::size_t k = 0; k < spec.dim; ++k) p[k] = center[k] + sign * spec.spread * m[k];
      out.push_back(std::move(p));
    }
  };
  std::vector<Vector> specific;
  Vector mean(spec.dim, 0.0);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    specific.push_back(orthogonal_unit({&center, &axis}));
    for (std::size_t k = 0; k < spec.dim; ++k) mean[k] += specific.back()[k] / spec.classes;
  }
  std::vector<Vector> modes;
  for (auto& r : specific) {
    for (std::size_t k = 0; k < spec.dim; ++k) r[k] -= mean[k];
    r = l2_normalize(r);
    for (std::size_t k = 0; k < spec.dim; ++k) r[k] += spec.shared * axis[k];
    mode_pair(l2_normalize(r), modes);
  }
  std::vector<Vector> ood_modes;
  mode_pair(axis, ood_modes);

  const auto draw = [&](Split split) {
    LabeledEmbeddings ds = detail::sample_around(modes, spec.per_class / 2, spec.noise_sigma, rng,
                                                 "overlap-id", split, true);
    for (int& y : *ds.labels) y /= 2;
    return ds;
  };
  SyntheticData out;
  out.id_train = draw(Split::train);
  out.id_test = draw(Split::test);
  out.ood = detail::sample_around(ood_modes, spec.classes * spec.per_class / 2, spec.noise_sigma,
                                  rng, "overlap-ood", Split::test, false);
  return out;
}

}  // namespace oodforge
