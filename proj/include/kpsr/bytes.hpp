#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kpsr/errors.hpp"

namespace kpsr {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL);
inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }
std::string hex64(std::uint64_t v);

// Little-endian binary encoder used for feature-map records, bundles and checkpoints.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v);
  void str(const std::string& s);
  void raw(const void* p, std::size_t n);
  void vec(const Eigen::VectorXd& v);
  void mat(const Eigen::MatrixXd& m);
  void ints(const std::vector<int>& v);
  void doubles(const std::vector<double>& v);

  const std::vector<std::uint8_t>& bytes() const { return buf_; }
  std::string as_string() const { return std::string(buf_.begin(), buf_.end()); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  explicit ByteReader(const std::string& s)
      : p_(reinterpret_cast<const std::uint8_t*>(s.data())), n_(s.size()) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64();
  std::string str();
  void raw(void* out, std::size_t n);
  Eigen::VectorXd vec();
  Eigen::MatrixXd mat();
  std::vector<int> ints();
  std::vector<double> doubles();

  bool done() const { return pos_ == n_; }
  std::size_t remaining() const { return n_ - pos_; }

 private:
  void need(std::size_t k) const;
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& data);

}  // namespace kpsr
