#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "kpsr/data.hpp"
#include "kpsr/kernel.hpp"

namespace kpsr {

// Design matrix that keeps a sparse copy when the features are mostly zero
// (one-hot products), so moment matrices cost O(nnz) instead of O(d*K).
class Design {
 public:
  explicit Design(const Eigen::MatrixXd& X);
  explicit Design(Eigen::SparseMatrix<double> X);

  Eigen::Index rows() const { return sparse_ ? sp_.rows() : dense_.rows(); }
  Eigen::Index cols() const { return sparse_ ? sp_.cols() : dense_.cols(); }
  bool is_sparse() const { return sparse_; }
  const Eigen::MatrixXd& dense() const { return dense_; }
  const Eigen::SparseMatrix<double>& sparse() const { return sp_; }

  Eigen::MatrixXd gram() const;                             // X X^T
  Eigen::MatrixXd cross(const Eigen::MatrixXd& Y) const;    // Y X^T
  Eigen::MatrixXd apply(const Eigen::MatrixXd& W) const;    // W X

 private:
  bool sparse_ = false;
  Eigen::MatrixXd dense_;
  Eigen::SparseMatrix<double> sp_;
};

// Column-wise Kronecker product of two designs.
Design khatri_rao(const Design& A, const Design& B);

struct RidgeFit {
  Eigen::MatrixXd W;
  double lambda = 0.0;
  double loss = 0.0;           // (1/K)||Y - W X||_F^2 + lambda ||W||_F^2
  double gradient_norm = 0.0;  // norm of the loss gradient at W
};

// Default ridge: c K^{-1/2} with c = 0.1 * mean diagonal of (1/K) X X^T.
double default_lambda(const Eigen::MatrixXd& second_moment, std::size_t K);

// Minimizer of (1/K)||Y - W X||^2 + lambda||W||^2, i.e. W = C_YX (C_XX + lambda I)^{-1}.
// A non-positive lambda selects default_lambda.
RidgeFit ridge_fit(const Eigen::MatrixXd& Y, const Design& X, double lambda);
RidgeFit ridge_fit(const Eigen::MatrixXd& Y, const Design& X, const Eigen::VectorXd& weights, double lambda);

struct EmbeddingOperator {
  Eigen::MatrixXd matrix;  // codomain x domain
  std::uint64_t domain = 0;
  std::uint64_t codomain = 0;
  double lambda = 0.0;
  std::int64_t samples = 0;
  double loss = 0.0;
};

FeatureVector predict(const EmbeddingOperator& op, const FeatureVector& x);

Eigen::MatrixXd covariance(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y);

// Operator from Y-features to X-embeddings: C_XY (C_YY + lambda I)^{-1}.
EmbeddingOperator conditional_operator(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, double lambda,
                                       std::uint64_t x_space = 0, std::uint64_t y_space = 0);

// Kernel Bayes rule weights w_k = phi_Z(z_k)^T (C_ZZ + lambda I)^{-1} phi_Z(z), rescaled to mean one.
Eigen::VectorXd kbr_weights(const Eigen::MatrixXd& Z, const Eigen::VectorXd& z, double lambda);

// Conditional operator Y -> X at the point z, a ridge fit under the weights above.
EmbeddingOperator kbr_conditional(const Eigen::MatrixXd& X, const Eigen::MatrixXd& Y, const Eigen::MatrixXd& Z,
                                  const Eigen::VectorXd& z, double lambda, std::uint64_t x_space = 0,
                                  std::uint64_t y_space = 0);

struct FitSpaces {
  std::uint64_t H = 0, A = 0, O = 0, a = 0, o = 0;
  static FitSpaces of(const SpaceMaps& m);
};

// phi^H(h) (x) phi^A(t_h(a)) -> phi^O(t_h(o))
EmbeddingOperator fit_forward(const RegressionBlocks& b, const FitSpaces& s, double lambda);
// phi^H(h_{t+1}) (x) phi^A(t_{h+1}(a)) -> phi^O(t_{h+1}(o)), the direct shifted refit
EmbeddingOperator fit_shifted_forward(const RegressionBlocks& b, const FitSpaces& s, double lambda);
// phi^H(h) (x) phi^a(a_{t-1}) -> phi^o(o_t)
EmbeddingOperator fit_one_step(const RegressionBlocks& b, const FitSpaces& s, double lambda);
// phi^H(h) (x) phi^A(t_{h+1}(a)) (x) phi^a(a_{t-1}) -> phi^O(t_{h+1}(o)) (x) phi^o(o_t)
EmbeddingOperator fit_extended(const RegressionBlocks& b, const FitSpaces& s, double lambda);

// Three-mode array unfolded as n x (d_o * d_a * n). Contracting the first two
// modes against z = phi^o(o) (x) phi^a(a) gives the n x n lift P_{o,a}.
struct ShiftedOperator {
  Eigen::MatrixXd unfolded;
  int d_o = 0, d_a = 0, n = 0;
  std::uint64_t z_space = 0;  // space of phi^o (x) phi^a
  std::uint64_t space = 0;    // space of the forward codomain
  double lambda = 0.0;
  std::int64_t samples = 0;
  double loss = 0.0;

  Eigen::MatrixXd contract(const Eigen::VectorXd& z) const;
  Eigen::VectorXd apply(const Eigen::VectorXd& z, const Eigen::VectorXd& u) const;
};

// Regresses phi^O(t_{h+1}(o)) on z (x) F(phi^H(h) (x) phi^A(t_{h+1}(a))).
ShiftedOperator fit_shifted(const RegressionBlocks& b, const FitSpaces& s, const EmbeddingOperator& forward,
                            double lambda);

// Relative Frobenius gap between stacked predictions P(z (x) F(h, As)) and the
// direct refit G(h_{t+1}, As) over the given samples.
double composition_gap(const RegressionBlocks& b, const EmbeddingOperator& forward, const ShiftedOperator& shifted,
                       const EmbeddingOperator& shifted_forward);

struct OperatorBundle;

// sum_k c_k P(e_k (x) phi^a(a) (x) u) (x) e_k with c the one-step prediction;
// needs a one-hot observation map.
Eigen::VectorXd factorized_extended(const OperatorBundle& bundle, const Eigen::VectorXd& h, const Eigen::VectorXd& a,
                                    const Eigen::VectorXd& As);

// Relative Frobenius gap between fit_extended predictions and the factorized form.
double extended_gap(const OperatorBundle& bundle, const RegressionBlocks& b);

struct LinkWeights {
  Eigen::VectorXd g;
  std::vector<Eigen::VectorXd> m;
  double lambda = 0.0;
  std::int64_t samples = 0;
  int d_h = 0, d_o = 0, d_O = 0;
  std::uint64_t space = 0;
};

struct OperatorBundle {
  SpaceMaps maps;
  int W = 0, L = 0;
  EmbeddingOperator one_step, forward, shifted_forward, extended;
  ShiftedOperator shifted;
  Eigen::VectorXd mean_action;        // training mean of phi^a(a_{t-1})
  Eigen::VectorXd mean_test_actions;  // training mean of phi^A(t_{h+1}(a))
  std::int64_t samples = 0;
  std::uint64_t seed = 0;
  std::optional<LinkWeights> links;
  std::string provenance;  // config hash and tool version of the producing run

  FitSpaces spaces() const { return FitSpaces::of(maps); }
  Eigen::VectorXd forward_predict(const Eigen::VectorXd& h, const Eigen::VectorXd& A) const;
  Eigen::VectorXd one_step_predict(const Eigen::VectorXd& h, const Eigen::VectorXd& a) const;
  Eigen::VectorXd extended_predict(const Eigen::VectorXd& h, const Eigen::VectorXd& As, const Eigen::VectorXd& a) const;
};

struct FitOptions {
  double lambda = 0.0;  // non-positive selects the default schedule
  std::uint64_t seed = 0;
  long long max_domain_dim = 1LL << 20;
};

OperatorBundle fit_bundle(const SpaceMaps& maps, int W, int L, const RegressionBlocks& b, const FitOptions& opt);

void write_links(ByteWriter& w, const LinkWeights& l);
LinkWeights read_links(ByteReader& r);

constexpr std::uint32_t kBundleVersion = 1;
std::string serialize_bundle(const OperatorBundle& b);
OperatorBundle deserialize_bundle(const std::string& bytes);
void save_bundle(const OperatorBundle& b, const std::string& path);
OperatorBundle load_bundle(const std::string& path);

}  // namespace kpsr
