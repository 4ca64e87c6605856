#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/bytes.hpp"

namespace kpsr {

// Raw step input: a symbol (one component) or a real vector. An empty point
// marks a padded step in a history suffix.
using Point = std::vector<double>;
using Block = std::vector<Point>;

enum class KernelKind { OneHot, RadialBasis, Linear };
enum class BlockMode { Tensor, Concat };

std::string to_string(KernelKind k);
KernelKind kernel_kind_from_string(const std::string& s);
std::string to_string(BlockMode m);
BlockMode block_mode_from_string(const std::string& s);

struct KernelSpec {
  KernelKind kind = KernelKind::OneHot;
  double bandwidth = 1.0;  // radial-basis only
  std::uint64_t seed = 0;  // radial-basis only
  int rff_dim = 256;       // radial-basis output size per block, must be even
  bool affine = false;     // linear only: features (1, x)
};

struct MapShape {
  int arity = 1;              // number of steps in one input block
  std::vector<int> radices;   // one-hot: alphabet size of each step component
  int input_dim = 0;          // linear / radial-basis: components per step
  BlockMode mode = BlockMode::Tensor;
  bool pad = false;           // accept empty (padded) steps
};

class FeatureMap {
 public:
  FeatureMap() = default;

  const KernelSpec& spec() const { return spec_; }
  const MapShape& shape() const { return shape_; }
  int output_dim() const { return output_dim_; }
  std::uint64_t id() const { return id_; }
  int arity() const { return shape_.arity; }

  // Feature vector of one block; the block must hold exactly arity() steps.
  Eigen::VectorXd features(const Block& block) const;

  // Width of the per-step one-hot alphabet (including the pad slot).
  int step_alphabet() const { return step_alphabet_; }

  void write(ByteWriter& w) const;
  static FeatureMap read(ByteReader& r);

 private:
  friend FeatureMap make_feature_map(const KernelSpec& spec, const MapShape& shape);
  void finalize();
  void write_body(ByteWriter& w) const;
  Eigen::VectorXd step_features(const Point& p) const;
  int step_symbol(const Point& p) const;
  Eigen::VectorXd rff(const Eigen::VectorXd& x) const;

  KernelSpec spec_;
  MapShape shape_;
  int output_dim_ = 0;
  int step_alphabet_ = 0;
  Eigen::MatrixXd omega_;  // radial-basis frequencies, one row per cos/sin pair
  std::uint64_t id_ = 0;
};

struct FeatureVector {
  Eigen::VectorXd values;
  std::uint64_t space = 0;
};

FeatureMap make_feature_map(const KernelSpec& spec, const MapShape& shape);

FeatureVector embed(const FeatureMap& map, const Block& block);
FeatureVector embed(const FeatureMap& map, const Point& step);

Eigen::VectorXd kron(const Eigen::VectorXd& a, const Eigen::VectorXd& b);
std::uint64_t tensor_space(std::uint64_t a, std::uint64_t b);
FeatureVector tensor_feature(const FeatureVector& a, const FeatureVector& b);

// Columns are the feature vectors of the inputs.
Eigen::MatrixXd feature_matrix(const FeatureMap& map, const std::vector<Block>& inputs);
Eigen::MatrixXd gram_matrix(const FeatureMap& map, const std::vector<Block>& inputs);

// Median pairwise distance over a subsample of at most 256 points.
double median_heuristic(const std::vector<Eigen::VectorXd>& points, std::uint64_t seed);

// Column-wise Khatri-Rao product: column k is kron(A.col(k), B.col(k)).
Eigen::MatrixXd khatri_rao(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B);

}  // namespace kpsr
