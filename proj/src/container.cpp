#include "panis/container.hpp"

#include "panis/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace panis {
namespace {

constexpr const char* kMagic = "PANISBOX1";

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::uint64_t toLittle(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
}

}  // namespace

void ArrayBox::put(const std::string& name, std::vector<std::size_t> shape, std::vector<double> data) {
  if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos) {
    fail(ErrorKind::Io, "array name must be non-empty and whitespace-free: '" + name + "'");
  }
  if (product(shape) != data.size()) {
    fail(ErrorKind::Io, "array '" + name + "' shape does not match its element count");
  }
  if (!arrays_.contains(name)) order_.push_back(name);
  arrays_[name] = NamedArray{std::move(shape), std::move(data)};
}

void ArrayBox::put(const std::string& name, std::span<const double> values) {
  put(name, {values.size()}, std::vector<double>(values.begin(), values.end()));
}

void ArrayBox::put(const std::string& name, const Eigen::MatrixXd& matrix) {
  std::vector<double> data(static_cast<std::size_t>(matrix.size()));
  for (Eigen::Index i = 0; i < matrix.rows(); ++i)
    for (Eigen::Index j = 0; j < matrix.cols(); ++j)
      data[static_cast<std::size_t>(i * matrix.cols() + j)] = matrix(i, j);
  put(name, {static_cast<std::size_t>(matrix.rows()), static_cast<std::size_t>(matrix.cols())},
      std::move(data));
}

void ArrayBox::putScalar(const std::string& name, double value) { put(name, {1}, {value}); }

void ArrayBox::putText(const std::string& name, const std::string& text) {
  std::vector<double> data;
  data.reserve(text.size());
  for (unsigned char ch : text) data.push_back(static_cast<double>(ch));
  const std::size_t n = data.size();
  put(name, {n}, std::move(data));
}

bool ArrayBox::has(const std::string& name) const { return arrays_.contains(name); }

const NamedArray& ArrayBox::get(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) fail(ErrorKind::Io, "container has no array named '" + name + "'");
  return it->second;
}

std::vector<double> ArrayBox::vector(const std::string& name) const { return get(name).data; }

Eigen::MatrixXd ArrayBox::matrix(const std::string& name) const {
  const NamedArray& a = get(name);
  Eigen::Index rows = 0, cols = 0;
  if (a.shape.size() == 1) {
    rows = static_cast<Eigen::Index>(a.shape[0]);
    cols = 1;
  } else if (a.shape.size() == 2) {
    rows = static_cast<Eigen::Index>(a.shape[0]);
    cols = static_cast<Eigen::Index>(a.shape[1]);
  } else {
    fail(ErrorKind::Io, "array '" + name + "' is not one- or two-dimensional");
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = a.data[static_cast<std::size_t>(i * cols + j)];
  return m;
}

double ArrayBox::scalar(const std::string& name) const {
  const NamedArray& a = get(name);
  if (a.data.size() != 1) fail(ErrorKind::Io, "array '" + name + "' is not a scalar");
  return a.data[0];
}

std::string ArrayBox::text(const std::string& name) const {
  std::string out;
  for (double v : get(name).data) out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
  return out;
}

void ArrayBox::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
  os << kMagic << '\n';
  for (const auto& name : order_) {
    const NamedArray& a = arrays_.at(name);
    os << name << " f64 " << a.shape.size();
    for (std::size_t d : a.shape) os << ' ' << d;
    os << '\n';
  }
  os << "END\n";
  for (const auto& name : order_) {
    for (double v : arrays_.at(name).data) {
      std::uint64_t bits = toLittle(std::bit_cast<std::uint64_t>(v));
      os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
    }
  }
  if (!os) fail(ErrorKind::Io, "failed while writing '" + path + "'");
}

ArrayBox ArrayBox::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorKind::Io, "cannot open '" + path + "'");
  std::string line;
  if (!std::getline(is, line) || line != kMagic) {
    fail(ErrorKind::Io, "'" + path + "' is not a PANISBOX1 container");
  }
  std::vector<std::pair<std::string, std::vector<std::size_t>>> header;
  while (true) {
    if (!std::getline(is, line)) fail(ErrorKind::Io, "'" + path + "': truncated header");
    if (line == "END") break;
    std::istringstream ls(line);
    std::string name, type;
    std::size_t rank = 0;
    if (!(ls >> name >> type >> rank) || type != "f64") {
      fail(ErrorKind::Io, "'" + path + "': malformed header line '" + line + "'");
    }
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) {
      if (!(ls >> d)) fail(ErrorKind::Io, "'" + path + "': malformed shape in '" + line + "'");
    }
    header.emplace_back(std::move(name), std::move(shape));
  }
  ArrayBox box;
  for (auto& [name, shape] : header) {
    std::vector<double> data(product(shape));
    for (double& v : data) {
      std::uint64_t bits = 0;
      if (!is.read(reinterpret_cast<char*>(&bits), sizeof bits)) {
        fail(ErrorKind::Io, "'" + path + "': truncated payload for '" + name + "'");
      }
      v = std::bit_cast<double>(toLittle(bits));
    }
    box.put(name, std::move(shape), std::move(data));
  }
  return box;
}

}  // namespace panis
