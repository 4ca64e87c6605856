#include "kpsr/operators.hpp"

#include <cmath>
#include <map>

#include "kpsr/errors.hpp"

namespace kpsr {

namespace {

constexpr double kSparseDensity = 0.3;

Eigen::SparseMatrix<double> to_sparse(const Eigen::MatrixXd& X) { return X.sparseView(); }

double density(const Eigen::MatrixXd& X) {
  if (X.size() == 0) return 0.0;
  return static_cast<double>((X.array() != 0.0).count()) / static_cast<double>(X.size());
}

Eigen::MatrixXd spd_solve_right(const Eigen::MatrixXd& C_yx, Eigen::MatrixXd G, double lambda) {
  // Returns C_yx (G + lambda I)^{-1} through a Cholesky factorization.
  G.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(G);
  if (llt.info() == Eigen::Success) {
    Eigen::MatrixXd Wt = llt.solve(C_yx.transpose());
    if (Wt.allFinite()) return Wt.transpose();
  }
  // Weighted fits with negative weights can leave the matrix indefinite.
  Eigen::LDLT<Eigen::MatrixXd> ldlt(G);
  Eigen::MatrixXd Wt = ldlt.solve(C_yx.transpose());
  if (ldlt.info() != Eigen::Success || !Wt.allFinite()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G, Eigen::EigenvaluesOnly);
    const double lo = es.eigenvalues().minCoeff();
    const double hi = es.eigenvalues().maxCoeff();
    throw NumericalError("ridge solve failed: regularized moment matrix has eigenvalues in [" + std::to_string(lo) +
                         ", " + std::to_string(hi) + "]");
  }
  return Wt.transpose();
}

}  // namespace

Design::Design(const Eigen::MatrixXd& X) {
  if (density(X) < kSparseDensity) {
    sparse_ = true;
    sp_ = to_sparse(X);
    sp_.makeCompressed();
  } else {
    dense_ = X;
  }
}

Design::Design(Eigen::SparseMatrix<double> X) : sparse_(true), sp_(std::move(X)) { sp_.makeCompressed(); }

Eigen::MatrixXd Design::gram() const {
  if (sparse_) {
    Eigen::SparseMatrix<double> G = sp_ * sp_.transpose();
    return Eigen::MatrixXd(G);
  }
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(dense_.rows(), dense_.rows());
  G.selfadjointView<Eigen::Lower>().rankUpdate(dense_);
  return G.selfadjointView<Eigen::Lower>();
}

Eigen::MatrixXd Design::cross(const Eigen::MatrixXd& Y) const {
  if (sparse_) return (sp_ * Y.transpose()).transpose();
  return Y * dense_.transpose();
}

Eigen::MatrixXd Design::apply(const Eigen::MatrixXd& W) const {
  if (sparse_) return W * sp_;
  return W * dense_;
}

Design khatri_rao(const Design& A, const Design& B) {
  if (A.cols() != B.cols()) throw ShapeError("khatri-rao product needs equal column counts");
  if (A.is_sparse() && B.is_sparse()) {
    const auto& a = A.sparse();
    const auto& b = B.sparse();
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(static_cast<std::size_t>(a.nonZeros()));
    for (Eigen::Index k = 0; k < a.outerSize(); ++k)
      for (Eigen::SparseMatrix<double>::InnerIterator ia(a, k); ia; ++ia)
        for (Eigen::SparseMatrix<double>::InnerIterator ib(b, k); ib; ++ib)
          trip.emplace_back(ia.row() * b.rows() + ib.row(), k, ia.value() * ib.value());
    Eigen::SparseMatrix<double> out(a.rows() * b.rows(), a.cols());
    out.setFromTriplets(trip.begin(), trip.end());
    return Design(std::move(out));
  }
  const Eigen::MatrixXd da = A.is_sparse() ? Eigen::MatrixXd(A.sparse()) : A.dense();
  const Eigen::MatrixXd db = B.is_sparse() ? Eigen::MatrixXd(B.sparse()) : B.dense();
  return Design(khatri_rao(da, db));
}

double default_lambda(const Eigen::MatrixXd& second_moment, std::size_t K) {
  const double c = 0.1 * second_moment.diagonal().mean();
  const double lam = c / std::sqrt(static_cast<double>(K));
  if (!(lam > 0.0)) throw NumericalError("default ridge is not positive (all-zero features?)");
  return lam;
}

namespace {

RidgeFit finish_fit(const Eigen::MatrixXd& Y, const Design& X, const Eigen::VectorXd* weights, const Eigen::MatrixXd& G,
                    const Eigen::MatrixXd& C, double lambda, Eigen::MatrixXd W) {
  RidgeFit f;
  f.lambda = lambda;
  const double K = static_cast<double>(X.cols());
  Eigen::MatrixXd R = Y - X.apply(W);
  double rss = 0.0;
  if (weights)
    rss = (R.colwise().squaredNorm().transpose().array() * weights->array()).sum();
  else
    rss = R.squaredNorm();
  f.loss = rss / K + lambda * W.squaredNorm();
  f.gradient_norm = (2.0 * (W * G - C) + 2.0 * lambda * W).norm();
  f.W = std::move(W);
  return f;
}

}  // namespace

RidgeFit ridge_fit(const Eigen::MatrixXd& Y, const Design& X, double lambda) {
  if (Y.cols() != X.cols()) throw ShapeError("targets and design have different sample counts");
  if (X.cols() < 1) throw ShapeError("ridge fit needs at least one sample");
  const double K = static_cast<double>(X.cols());
  const Eigen::MatrixXd G = X.gram() / K;
  const Eigen::MatrixXd C = X.cross(Y) / K;
  if (!(lambda > 0.0)) lambda = default_lambda(G, X.cols());
  return finish_fit(Y, X, nullptr, G, C, lambda, spd_solve_right(C, G, lambda));
}

RidgeFit ridge_fit(const Eigen::MatrixXd& Y, const Design& X, const Eigen::VectorXd& weights, double lambda) {
  if (Y.cols() != X.cols() || weights.size() != X.cols()) throw ShapeError("weighted ridge inputs disagree in size");
  if (X.cols() < 1) throw ShapeError("ridge fit needs at least one sample");
  const double K = static_cast<double>(X.cols());
  Eigen::MatrixXd G, C;
  if (X.is_sparse()) {
    Eigen::SparseMatrix<double> Xw = X.sparse() * weights.asDiagonal();
    G = Eigen::MatrixXd(Eigen::SparseMatrix<double>(Xw * X.sparse().transpose())) / K;
    C = (Xw * Y.transpose()).transpose() / K;
  } else {
    const Eigen::MatrixXd Xw = X.dense() * weights.asDiagonal();
    G = Xw * X.dense().transpose() / K;
    C = Y * Xw.transpose() / K;
  }
  G = 0.5 * (G + G.transpose());
  if (!(lambda > 0.0)) lambda = default_lambda(G, X.cols());
  return finish_fit(Y, X, &weights, G, C, lambda, spd_solve_right(C, G, lambda));
}

FeatureVector predict(const EmbeddingOperator& op, const FeatureVector& x) {
  if (x.space != op.domain) throw SpaceMismatch("operator domain does not match the input feature space");
  if (x.values.size() != op.matrix.cols()) throw ShapeError("input length differs from the operator domain");
  return {op.matrix * x.values, op.codomain};
}

Eigen::MatrixXd covariance(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y) {
  if (X.cols() != Y.cols()) throw ShapeError("covariance inputs have different sample counts");
  if (X.cols() < 1) throw ShapeError("covariance of an empty sample");
  return X * Y.transpose() / static_cast<double>(X.cols());
}

EmbeddingOperator conditional_operator(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda,
                                       std::uint64_t x_space, std::uint64_t y_space) {
  if (!(lambda > 0.0)) throw ConfigError("conditional operator needs a positive ridge");
  auto f = ridge_fit(X, Design(Y), lambda);
  return {std::move(f.W), y_space, x_space, lambda, static_cast<std::int64_t>(X.cols()), f.loss};
}

Eigen::VectorXd kbr_weights(const Eigen::MatrixXd& Z, const Eigen::VectorXd& z, double lambda) {
  if (!(lambda > 0.0)) throw ConfigError("kernel Bayes rule needs a positive ridge");
  if (z.size() != Z.rows()) throw ShapeError("conditioning point has the wrong feature length");
  const double K = static_cast<double>(Z.cols());
  Eigen::MatrixXd G = Z * Z.transpose() / K;
  G.diagonal().array() += lambda;
  Eigen::LLT<Eigen::MatrixXd> llt(G);
  if (llt.info() != Eigen::Success) throw NumericalError("kernel Bayes rule weight solve failed");
  const Eigen::VectorXd beta = llt.solve(z);
  Eigen::VectorXd w = Z.transpose() * beta;
  const double mean = w.mean();
  if (!(std::abs(mean) > 0.0)) throw NumericalError("conditioning point has no support in the sample");
  return w / mean;
}

EmbeddingOperator kbr_conditional(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const Eigen::MatrixXd& Z,
                                  const Eigen::VectorXd& z, double lambda, std::uint64_t x_space,
                                  std::uint64_t y_space) {
  if (X.cols() != Y.cols() || Y.cols() != Z.cols()) throw ShapeError("kernel Bayes rule inputs differ in sample count");
  const Eigen::VectorXd w = kbr_weights(Z, z, lambda);
  auto f = ridge_fit(X, Design(Y), w, lambda);
  return {std::move(f.W), y_space, x_space, lambda, static_cast<std::int64_t>(X.cols()), f.loss};
}

FitSpaces FitSpaces::of(const SpaceMaps& m) {
  return {m.history.id(), m.test_actions.id(), m.test_observations.id(), m.action.id(), m.observation.id()};
}

namespace {

EmbeddingOperator make_op(const Eigen::MatrixXd& Y, const Design& X, double lambda, std::uint64_t dom,
                          std::uint64_t cod) {
  auto f = ridge_fit(Y, X, lambda);
  return {std::move(f.W), dom, cod, f.lambda, static_cast<std::int64_t>(X.cols()), f.loss};
}

}  // namespace

EmbeddingOperator fit_forward(const RegressionBlocks& b, const FitSpaces& s, double lambda) {
  return make_op(b.O, khatri_rao(Design(b.H), Design(b.A)), lambda, tensor_space(s.H, s.A), s.O);
}

EmbeddingOperator fit_shifted_forward(const RegressionBlocks& b, const FitSpaces& s, double lambda) {
  return make_op(b.Os, khatri_rao(Design(b.Hs), Design(b.As)), lambda, tensor_space(s.H, s.A), s.O);
}

EmbeddingOperator fit_one_step(const RegressionBlocks& b, const FitSpaces& s, double lambda) {
  return make_op(b.o, khatri_rao(Design(b.H), Design(b.a)), lambda, tensor_space(s.H, s.a), s.o);
}

EmbeddingOperator fit_extended(const RegressionBlocks& b, const FitSpaces& s, double lambda) {
  const Design X = khatri_rao(khatri_rao(Design(b.H), Design(b.As)), Design(b.a));
  const Eigen::MatrixXd Y = khatri_rao(b.Os, b.o);
  return make_op(Y, X, lambda, tensor_space(tensor_space(s.H, s.A), s.a), tensor_space(s.O, s.o));
}

Eigen::MatrixXd ShiftedOperator::contract(const Eigen::VectorXd& z) const {
  if (z.size() != static_cast<Eigen::Index>(d_o) * d_a) throw ShapeError("shifted operator contraction: wrong z length");
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < z.size(); ++i)
    if (z[i] != 0.0) P += z[i] * unfolded.middleCols(i * n, n);
  return P;
}

Eigen::VectorXd ShiftedOperator::apply(const Eigen::VectorXd& z, const Eigen::VectorXd& u) const {
  if (u.size() != n) throw ShapeError("shifted operator: wrong embedding length");
  return contract(z) * u;
}

namespace {

Eigen::MatrixXd shifted_inputs(const RegressionBlocks& b, const EmbeddingOperator& forward) {
  const Design HA = khatri_rao(Design(b.H), Design(b.As));
  const Eigen::MatrixXd U = HA.apply(forward.matrix);
  return khatri_rao(khatri_rao(b.o, b.a), U);
}

}  // namespace

ShiftedOperator fit_shifted(const RegressionBlocks& b, const FitSpaces& s, const EmbeddingOperator& forward,
                            double lambda) {
  if (forward.codomain != s.O || forward.domain != tensor_space(s.H, s.A))
    throw SpaceMismatch("shifted fit given a forward operator from different feature spaces");
  const Design X(shifted_inputs(b, forward));
  auto f = ridge_fit(b.Os, X, lambda);
  ShiftedOperator p;
  p.unfolded = std::move(f.W);
  p.d_o = static_cast<int>(b.o.rows());
  p.d_a = static_cast<int>(b.a.rows());
  p.n = static_cast<int>(b.Os.rows());
  p.z_space = tensor_space(s.o, s.a);
  p.space = s.O;
  p.lambda = f.lambda;
  p.samples = static_cast<std::int64_t>(b.size());
  p.loss = f.loss;
  return p;
}

double composition_gap(const RegressionBlocks& b, const EmbeddingOperator& forward, const ShiftedOperator& shifted,
                       const EmbeddingOperator& shifted_forward) {
  const Eigen::MatrixXd Yc = shifted.unfolded * shifted_inputs(b, forward);
  const Eigen::MatrixXd Yd = khatri_rao(Design(b.Hs), Design(b.As)).apply(shifted_forward.matrix);
  const double den = Yd.norm();
  if (!(den > 0.0)) throw NumericalError("composition gap: direct refit predictions are zero");
  return (Yc - Yd).norm() / den;
}

Eigen::VectorXd OperatorBundle::forward_predict(const Eigen::VectorXd& h, const Eigen::VectorXd& A) const {
  return forward.matrix * kron(h, A);
}

Eigen::VectorXd OperatorBundle::one_step_predict(const Eigen::VectorXd& h, const Eigen::VectorXd& a) const {
  return one_step.matrix * kron(h, a);
}

Eigen::VectorXd OperatorBundle::extended_predict(const Eigen::VectorXd& h, const Eigen::VectorXd& As,
                                                 const Eigen::VectorXd& a) const {
  return extended.matrix * kron(kron(h, As), a);
}

Eigen::VectorXd factorized_extended(const OperatorBundle& bundle, const Eigen::VectorXd& h, const Eigen::VectorXd& a,
                                    const Eigen::VectorXd& As) {
  if (bundle.maps.observation.spec().kind != KernelKind::OneHot)
    throw UnsupportedError("factorized extended prediction needs one-hot observation features");
  const Eigen::VectorXd c = bundle.one_step_predict(h, a);
  const Eigen::VectorXd u = bundle.forward_predict(h, As);
  const auto d_o = c.size();
  const int n = bundle.shifted.n;
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n * d_o);
  for (Eigen::Index k = 0; k < d_o; ++k) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(d_o);
    e[k] = 1.0;
    const Eigen::VectorXd p = bundle.shifted.apply(kron(e, a), u);
    for (int j = 0; j < n; ++j) out[j * d_o + k] += c[k] * p[j];
  }
  return out;
}

double extended_gap(const OperatorBundle& bundle, const RegressionBlocks& b) {
  const Design X = khatri_rao(khatri_rao(Design(b.H), Design(b.As)), Design(b.a));
  const Eigen::MatrixXd Ye = X.apply(bundle.extended.matrix);
  Eigen::MatrixXd Yf(Ye.rows(), Ye.cols());
  for (Eigen::Index k = 0; k < Ye.cols(); ++k)
    Yf.col(k) = factorized_extended(bundle, b.H.col(k), b.a.col(k), b.As.col(k));
  const double den = Ye.norm();
  if (!(den > 0.0)) throw NumericalError("extended gap: extended predictions are zero");
  return (Ye - Yf).norm() / den;
}

OperatorBundle fit_bundle(const SpaceMaps& maps, int W, int L, const RegressionBlocks& b, const FitOptions& opt) {
  if (b.size() < 1) throw ShapeError("cannot fit operators on an empty sample");
  OperatorBundle out;
  out.maps = maps;
  out.W = W;
  out.L = L;
  out.samples = static_cast<std::int64_t>(b.size());
  out.seed = opt.seed;
  const FitSpaces s = FitSpaces::of(maps);
  const long long dom = static_cast<long long>(b.H.rows()) * b.A.rows() * b.a.rows();
  const long long zdom = static_cast<long long>(b.o.rows()) * b.a.rows() * b.O.rows();
  if (dom > opt.max_domain_dim || zdom > opt.max_domain_dim)
    throw ConfigError("operator domain dimension exceeds the configured cap of " + std::to_string(opt.max_domain_dim));
  out.one_step = fit_one_step(b, s, opt.lambda);
  out.forward = fit_forward(b, s, opt.lambda);
  out.shifted_forward = fit_shifted_forward(b, s, opt.lambda);
  out.shifted = fit_shifted(b, s, out.forward, opt.lambda);
  out.extended = fit_extended(b, s, opt.lambda);
  out.mean_action = b.a.rowwise().mean();
  out.mean_test_actions = b.As.rowwise().mean();
  return out;
}

namespace {

void write_op(ByteWriter& w, const EmbeddingOperator& op) {
  w.mat(op.matrix);
  w.u64(op.domain);
  w.u64(op.codomain);
  w.f64(op.lambda);
  w.i64(op.samples);
  w.f64(op.loss);
}

EmbeddingOperator read_op(ByteReader& r) {
  EmbeddingOperator op;
  op.matrix = r.mat();
  op.domain = r.u64();
  op.codomain = r.u64();
  op.lambda = r.f64();
  op.samples = r.i64();
  op.loss = r.f64();
  return op;
}

const char kMagic[8] = {'K', 'P', 'S', 'R', 'B', 'N', 'D', 'L'};

}  // namespace

void write_links(ByteWriter& w, const LinkWeights& l) {
  w.vec(l.g);
  w.u32(static_cast<std::uint32_t>(l.m.size()));
  for (const auto& v : l.m) w.vec(v);
  w.f64(l.lambda);
  w.i64(l.samples);
  w.i64(l.d_h);
  w.i64(l.d_o);
  w.i64(l.d_O);
  w.u64(l.space);
}

LinkWeights read_links(ByteReader& r) {
  LinkWeights l;
  l.g = r.vec();
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) l.m.push_back(r.vec());
  l.lambda = r.f64();
  l.samples = r.i64();
  l.d_h = static_cast<int>(r.i64());
  l.d_o = static_cast<int>(r.i64());
  l.d_O = static_cast<int>(r.i64());
  l.space = r.u64();
  return l;
}

std::string serialize_bundle(const OperatorBundle& b) {
  std::vector<std::pair<std::string, ByteWriter>> sections;
  auto add = [&](const std::string& name) -> ByteWriter& {
    sections.emplace_back(name, ByteWriter{});
    return sections.back().second;
  };
  {
    auto& w = add("meta");
    w.i64(b.W);
    w.i64(b.L);
    w.i64(b.samples);
    w.u64(b.seed);
  }
  {
    auto& w = add("maps");
    b.maps.history.write(w);
    b.maps.test_actions.write(w);
    b.maps.test_observations.write(w);
    b.maps.action.write(w);
    b.maps.observation.write(w);
  }
  write_op(add("one_step"), b.one_step);
  write_op(add("forward"), b.forward);
  write_op(add("shifted_forward"), b.shifted_forward);
  write_op(add("extended"), b.extended);
  {
    auto& w = add("shifted");
    w.mat(b.shifted.unfolded);
    w.i64(b.shifted.d_o);
    w.i64(b.shifted.d_a);
    w.i64(b.shifted.n);
    w.u64(b.shifted.z_space);
    w.u64(b.shifted.space);
    w.f64(b.shifted.lambda);
    w.i64(b.shifted.samples);
    w.f64(b.shifted.loss);
  }
  {
    auto& w = add("means");
    w.vec(b.mean_action);
    w.vec(b.mean_test_actions);
  }
  if (b.links) write_links(add("links"), *b.links);
  add("provenance").str(b.provenance);

  ByteWriter out;
  out.raw(kMagic, sizeof kMagic);
  out.u32(kBundleVersion);
  out.u32(static_cast<std::uint32_t>(sections.size()));
  for (const auto& [name, body] : sections) {
    out.str(name);
    out.str(body.as_string());
  }
  return out.as_string();
}

OperatorBundle deserialize_bundle(const std::string& bytes) {
  ByteReader r(bytes);
  char magic[8];
  r.raw(magic, sizeof magic);
  if (std::string(magic, 8) != std::string(kMagic, 8)) throw FormatError("not an operator bundle file");
  const auto version = r.u32();
  if (version != kBundleVersion)
    throw FormatError("unsupported bundle version " + std::to_string(version));
  const auto n = r.u32();
  std::map<std::string, std::string> sec;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    sec[name] = r.str();
  }
  if (!r.done()) throw FormatError("trailing bytes after bundle sections");
  auto need = [&](const std::string& name) -> const std::string& {
    auto it = sec.find(name);
    if (it == sec.end()) throw FormatError("bundle is missing section '" + name + "'");
    return it->second;
  };
  OperatorBundle b;
  {
    ByteReader s(need("meta"));
    b.W = static_cast<int>(s.i64());
    b.L = static_cast<int>(s.i64());
    b.samples = s.i64();
    b.seed = s.u64();
  }
  {
    ByteReader s(need("maps"));
    b.maps.history = FeatureMap::read(s);
    b.maps.test_actions = FeatureMap::read(s);
    b.maps.test_observations = FeatureMap::read(s);
    b.maps.action = FeatureMap::read(s);
    b.maps.observation = FeatureMap::read(s);
  }
  auto op = [&](const std::string& name) {
    ByteReader s(need(name));
    return read_op(s);
  };
  b.one_step = op("one_step");
  b.forward = op("forward");
  b.shifted_forward = op("shifted_forward");
  b.extended = op("extended");
  {
    ByteReader s(need("shifted"));
    b.shifted.unfolded = s.mat();
    b.shifted.d_o = static_cast<int>(s.i64());
    b.shifted.d_a = static_cast<int>(s.i64());
    b.shifted.n = static_cast<int>(s.i64());
    b.shifted.z_space = s.u64();
    b.shifted.space = s.u64();
    b.shifted.lambda = s.f64();
    b.shifted.samples = s.i64();
    b.shifted.loss = s.f64();
  }
  {
    ByteReader s(need("means"));
    b.mean_action = s.vec();
    b.mean_test_actions = s.vec();
  }
  if (sec.count("links")) {
    ByteReader s(sec["links"]);
    b.links = read_links(s);
  }
  if (sec.count("provenance")) {
    ByteReader s(sec["provenance"]);
    b.provenance = s.str();
  }
  const FitSpaces sp = b.spaces();
  const bool ok = b.forward.domain == tensor_space(sp.H, sp.A) && b.forward.codomain == sp.O &&
                  b.shifted_forward.domain == tensor_space(sp.H, sp.A) && b.shifted_forward.codomain == sp.O &&
                  b.one_step.domain == tensor_space(sp.H, sp.a) && b.one_step.codomain == sp.o &&
                  b.extended.domain == tensor_space(tensor_space(sp.H, sp.A), sp.a) &&
                  b.extended.codomain == tensor_space(sp.O, sp.o) && b.shifted.z_space == tensor_space(sp.o, sp.a) &&
                  b.shifted.space == sp.O;
  if (!ok) throw SpaceMismatch("bundle operators refer to feature maps other than the stored ones");
  return b;
}

void save_bundle(const OperatorBundle& b, const std::string& path) { write_file(path, serialize_bundle(b)); }

OperatorBundle load_bundle(const std::string& path) { return deserialize_bundle(read_file(path)); }

}  // namespace kpsr
