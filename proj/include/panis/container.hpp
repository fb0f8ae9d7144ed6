#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace panis {

/// A named double-precision array with a row-major shape.
struct NamedArray {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t size() const noexcept { return data.size(); }
};

/// In-memory form of the on-disk array container.
///
/// File layout:
///
///     PANISBOX1
///     <name> f64 <rank> <d0> <d1> ...
///     ...
///     END
///     <payload of every array, little-endian f64, row-major, header order>
///
/// Names may not contain whitespace. Arrays keep insertion order, so a
/// container written twice from the same content is byte-identical.
class ArrayBox {
 public:
  void put(const std::string& name, std::vector<std::size_t> shape, std::vector<double> data);
  void put(const std::string& name, std::span<const double> values);
  void put(const std::string& name, const Eigen::MatrixXd& matrix);
  void putScalar(const std::string& name, double value);
  /// Stores text as one f64 per byte, so every payload stays f64.
  void putText(const std::string& name, const std::string& text);

  bool has(const std::string& name) const;
  const NamedArray& get(const std::string& name) const;
  std::vector<double> vector(const std::string& name) const;
  Eigen::MatrixXd matrix(const std::string& name) const;
  double scalar(const std::string& name) const;
  std::string text(const std::string& name) const;

  const std::vector<std::string>& names() const noexcept { return order_; }

  void save(const std::string& path) const;
  static ArrayBox load(const std::string& path);

 private:
  std::vector<std::string> order_;
  std::map<std::string, NamedArray> arrays_;
};

}  // namespace panis
