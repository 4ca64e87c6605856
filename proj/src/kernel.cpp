#include "kpsr/kernel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "kpsr/errors.hpp"
#include "kpsr/rng.hpp"

namespace kpsr {

std::string to_string(KernelKind k) {
  switch (k) {
    case KernelKind::OneHot: return "one-hot";
    case KernelKind::RadialBasis: return "radial-basis";
    case KernelKind::Linear: return "linear";
  }
  return "?";
}

KernelKind kernel_kind_from_string(const std::string& s) {
  if (s == "one-hot") return KernelKind::OneHot;
  if (s == "radial-basis" || s == "rbf") return KernelKind::RadialBasis;
  if (s == "linear") return KernelKind::Linear;
  throw ConfigError("unknown kernel kind: " + s);
}

std::string to_string(BlockMode m) { return m == BlockMode::Tensor ? "tensor" : "concat"; }

BlockMode block_mode_from_string(const std::string& s) {
  if (s == "tensor") return BlockMode::Tensor;
  if (s == "concat") return BlockMode::Concat;
  throw ConfigError("unknown block mode: " + s);
}

namespace {

long long checked_pow(long long base, int exp) {
  long long v = 1;
  for (int i = 0; i < exp; ++i) {
    if (v > (1LL << 40) / std::max(base, 1LL)) throw ConfigError("feature dimension overflow");
    v *= base;
  }
  return v;
}

}  // namespace

FeatureMap make_feature_map(const KernelSpec& spec, const MapShape& shape) {
  if (shape.arity < 1) throw ConfigError("feature map arity must be positive");
  FeatureMap m;
  m.spec_ = spec;
  m.shape_ = shape;
  switch (spec.kind) {
    case KernelKind::OneHot: {
      if (shape.radices.empty()) throw ConfigError("one-hot map requires a finite alphabet");
      long long a = 1;
      for (int r : shape.radices) {
        if (r < 1) throw ConfigError("one-hot alphabet size must be positive");
        a *= r;
      }
      if (shape.pad) a += 1;
      m.step_alphabet_ = static_cast<int>(a);
      m.output_dim_ = static_cast<int>(shape.mode == BlockMode::Tensor ? checked_pow(a, shape.arity)
                                                                       : a * shape.arity);
      break;
    }
    case KernelKind::Linear: {
      if (shape.input_dim < 1) throw ConfigError("linear map requires a positive input dimension");
      const long long d = shape.input_dim + (spec.affine ? 1 : 0);
      m.output_dim_ = static_cast<int>(shape.mode == BlockMode::Tensor ? checked_pow(d, shape.arity)
                                                                       : d * shape.arity);
      break;
    }
    case KernelKind::RadialBasis: {
      if (shape.input_dim < 1) throw ConfigError("radial-basis map requires a positive input dimension");
      if (!(spec.bandwidth > 0.0)) throw ConfigError("radial-basis bandwidth must be positive");
      if (spec.rff_dim < 2 || spec.rff_dim % 2 != 0) throw ConfigError("radial-basis output size must be even and positive");
      const int in = shape.mode == BlockMode::Tensor ? shape.input_dim * shape.arity : shape.input_dim;
      const int pairs = spec.rff_dim / 2;
      Rng rng(spec.seed, 0x5246460ULL);
      m.omega_.resize(pairs, in);
      for (int i = 0; i < pairs; ++i)
        for (int j = 0; j < in; ++j) m.omega_(i, j) = rng.normal() / spec.bandwidth;
      m.output_dim_ = shape.mode == BlockMode::Tensor ? spec.rff_dim : spec.rff_dim * shape.arity;
      break;
    }
  }
  if (m.output_dim_ < 1) throw ConfigError("feature map output dimension must be positive");
  m.finalize();
  return m;
}

void FeatureMap::write_body(ByteWriter& w) const {
  w.u8(static_cast<std::uint8_t>(spec_.kind));
  w.f64(spec_.bandwidth);
  w.u64(spec_.seed);
  w.i64(spec_.rff_dim);
  w.u8(spec_.affine ? 1 : 0);
  w.i64(shape_.arity);
  w.ints(shape_.radices);
  w.i64(shape_.input_dim);
  w.u8(static_cast<std::uint8_t>(shape_.mode));
  w.u8(shape_.pad ? 1 : 0);
  w.i64(output_dim_);
  w.mat(omega_);
}

void FeatureMap::finalize() {
  ByteWriter w;
  write_body(w);
  id_ = fnv1a(w.bytes().data(), w.bytes().size());
}

void FeatureMap::write(ByteWriter& w) const {
  ByteWriter body;
  write_body(body);
  w.str(body.as_string());
  w.u64(id_);
}

FeatureMap FeatureMap::read(ByteReader& r) {
  const std::string body = r.str();
  const std::uint64_t stored = r.u64();
  ByteReader b(body);
  FeatureMap m;
  const auto kind = b.u8();
  if (kind > 2) throw FormatError("feature map record has unknown kernel kind");
  m.spec_.kind = static_cast<KernelKind>(kind);
  m.spec_.bandwidth = b.f64();
  m.spec_.seed = b.u64();
  m.spec_.rff_dim = static_cast<int>(b.i64());
  m.spec_.affine = b.u8() != 0;
  m.shape_.arity = static_cast<int>(b.i64());
  m.shape_.radices = b.ints();
  m.shape_.input_dim = static_cast<int>(b.i64());
  const auto mode = b.u8();
  if (mode > 1) throw FormatError("feature map record has unknown block mode");
  m.shape_.mode = static_cast<BlockMode>(mode);
  m.shape_.pad = b.u8() != 0;
  m.output_dim_ = static_cast<int>(b.i64());
  m.omega_ = b.mat();
  if (!b.done()) throw FormatError("feature map record has trailing bytes");
  if (m.spec_.kind == KernelKind::OneHot) {
    long long a = 1;
    for (int x : m.shape_.radices) a *= x;
    m.step_alphabet_ = static_cast<int>(a + (m.shape_.pad ? 1 : 0));
  }
  m.finalize();
  if (m.id_ != stored) throw SpaceMismatch("feature map id does not match its recorded contents");
  return m;
}

int FeatureMap::step_symbol(const Point& p) const {
  if (p.empty()) {
    if (!shape_.pad) throw ShapeError("padded step given to a map without padding");
    return step_alphabet_ - 1;
  }
  if (p.size() != shape_.radices.size())
    throw ShapeError("one-hot step has " + std::to_string(p.size()) + " components, expected " +
                     std::to_string(shape_.radices.size()));
  int idx = 0;
  for (std::size_t c = 0; c < p.size(); ++c) {
    const double v = p[c];
    const int s = static_cast<int>(v);
    if (v != static_cast<double>(s) || s < 0 || s >= shape_.radices[c])
      throw ShapeError("symbol outside the one-hot alphabet");
    idx = idx * shape_.radices[c] + s;
  }
  return idx;
}

Eigen::VectorXd FeatureMap::rff(const Eigen::VectorXd& x) const {
  const Eigen::Index pairs = omega_.rows();
  Eigen::VectorXd proj = omega_ * x;
  Eigen::VectorXd out(2 * pairs);
  const double s = std::sqrt(1.0 / static_cast<double>(pairs));
  for (Eigen::Index i = 0; i < pairs; ++i) {
    out[2 * i] = s * std::cos(proj[i]);
    out[2 * i + 1] = s * std::sin(proj[i]);
  }
  return out;
}

Eigen::VectorXd FeatureMap::step_features(const Point& p) const {
  switch (spec_.kind) {
    case KernelKind::OneHot: {
      Eigen::VectorXd v = Eigen::VectorXd::Zero(step_alphabet_);
      v[step_symbol(p)] = 1.0;
      return v;
    }
    case KernelKind::Linear: {
      const int d = shape_.input_dim + (spec_.affine ? 1 : 0);
      Eigen::VectorXd v = Eigen::VectorXd::Zero(d);
      if (p.empty()) {
        if (!shape_.pad) throw ShapeError("padded step given to a map without padding");
        return v;
      }
      if (static_cast<int>(p.size()) != shape_.input_dim) throw ShapeError("linear step has wrong dimension");
      int off = 0;
      if (spec_.affine) v[off++] = 1.0;
      for (int i = 0; i < shape_.input_dim; ++i) v[off + i] = p[i];
      return v;
    }
    case KernelKind::RadialBasis: {
      Eigen::VectorXd x = Eigen::VectorXd::Zero(shape_.input_dim);
      if (p.empty()) {
        if (!shape_.pad) throw ShapeError("padded step given to a map without padding");
      } else {
        if (static_cast<int>(p.size()) != shape_.input_dim) throw ShapeError("radial-basis step has wrong dimension");
        for (int i = 0; i < shape_.input_dim; ++i) x[i] = p[i];
      }
      return rff(x);
    }
  }
  return {};
}

Eigen::VectorXd FeatureMap::features(const Block& block) const {
  if (static_cast<int>(block.size()) != shape_.arity)
    throw ShapeError("block has " + std::to_string(block.size()) + " steps, map arity is " +
                     std::to_string(shape_.arity));
  if (spec_.kind == KernelKind::RadialBasis && shape_.mode == BlockMode::Tensor) {
    // The product of per-step Gaussian kernels is the Gaussian kernel on the
    // concatenated block, so one set of frequencies covers the whole block.
    Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(shape_.input_dim) * shape_.arity);
    for (int s = 0; s < shape_.arity; ++s) {
      const Point& p = block[s];
      if (p.empty()) {
        if (!shape_.pad) throw ShapeError("padded step given to a map without padding");
        continue;
      }
      if (static_cast<int>(p.size()) != shape_.input_dim) throw ShapeError("radial-basis step has wrong dimension");
      for (int i = 0; i < shape_.input_dim; ++i) x[s * shape_.input_dim + i] = p[i];
    }
    return rff(x);
  }
  if (spec_.kind == KernelKind::OneHot && shape_.mode == BlockMode::Tensor) {
    long long idx = 0;
    for (const Point& p : block) idx = idx * step_alphabet_ + step_symbol(p);
    Eigen::VectorXd v = Eigen::VectorXd::Zero(output_dim_);
    v[static_cast<Eigen::Index>(idx)] = 1.0;
    return v;
  }
  if (shape_.mode == BlockMode::Tensor) {
    Eigen::VectorXd v = step_features(block[0]);
    for (int s = 1; s < shape_.arity; ++s) v = kron(v, step_features(block[s]));
    return v;
  }
  Eigen::VectorXd v(output_dim_);
  Eigen::Index off = 0;
  for (const Point& p : block) {
    Eigen::VectorXd f = step_features(p);
    v.segment(off, f.size()) = f;
    off += f.size();
  }
  return v;
}

FeatureVector embed(const FeatureMap& map, const Block& block) { return {map.features(block), map.id()}; }

FeatureVector embed(const FeatureMap& map, const Point& step) { return embed(map, Block{step}); }

Eigen::VectorXd kron(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  Eigen::VectorXd out(a.size() * b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a[i] * b;
  return out;
}

std::uint64_t tensor_space(std::uint64_t a, std::uint64_t b) {
  const std::uint64_t pair[3] = {0x74656e736f72ULL, a, b};
  return fnv1a(pair, sizeof pair);
}

FeatureVector tensor_feature(const FeatureVector& a, const FeatureVector& b) {
  return {kron(a.values, b.values), tensor_space(a.space, b.space)};
}

Eigen::MatrixXd feature_matrix(const FeatureMap& map, const std::vector<Block>& inputs) {
  Eigen::MatrixXd X(map.output_dim(), static_cast<Eigen::Index>(inputs.size()));
  for (std::size_t k = 0; k < inputs.size(); ++k) X.col(static_cast<Eigen::Index>(k)) = map.features(inputs[k]);
  return X;
}

Eigen::MatrixXd gram_matrix(const FeatureMap& map, const std::vector<Block>& inputs) {
  if (inputs.empty()) throw ShapeError("gram matrix of an empty input list");
  const Eigen::MatrixXd X = feature_matrix(map, inputs);
  Eigen::MatrixXd G = X.transpose() * X;
  return 0.5 * (G + G.transpose());
}

double median_heuristic(const std::vector<Eigen::VectorXd>& points, std::uint64_t seed) {
  if (points.size() < 2) throw ShapeError("median heuristic needs at least two points");
  std::vector<std::size_t> idx(points.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (idx.size() > 256) {
    Rng rng(seed, 0x6d6564ULL);
    for (std::size_t i = 0; i < 256; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
    idx.resize(256);
  }
  std::vector<double> d;
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = i + 1; j < idx.size(); ++j) d.push_back((points[idx[i]] - points[idx[j]]).norm());
  std::nth_element(d.begin(), d.begin() + d.size() / 2, d.end());
  const double med = d[d.size() / 2];
  if (!(med > 0.0)) throw NumericalError("median pairwise distance is zero");
  return med;
}

Eigen::MatrixXd khatri_rao(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B) {
  if (A.cols() != B.cols()) throw ShapeError("khatri-rao product needs equal column counts");
  Eigen::MatrixXd out(A.rows() * B.rows(), A.cols());
  for (Eigen::Index k = 0; k < A.cols(); ++k)
    for (Eigen::Index i = 0; i < A.rows(); ++i) out.col(k).segment(i * B.rows(), B.rows()) = A(i, k) * B.col(k);
  return out;
}

}  // namespace kpsr
