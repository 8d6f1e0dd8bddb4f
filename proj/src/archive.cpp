#include "dermagan/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dermagan/error.hpp"

namespace dermagan {

static_assert(std::endian::native == std::endian::little,
              "archive payloads are written in host order");

namespace {

constexpr char kMagic[8] = {'D', 'G', 'A', 'R', 'C', '0', '0', '1'};

std::string dtype_name(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return "f32";
    case torch::kFloat64: return "f64";
    case torch::kInt64: return "i64";
    case torch::kInt32: return "i32";
    case torch::kUInt8: return "u8";
    case torch::kBool: return "bool";
    default: throw InvalidArgument("archive: unsupported dtype " + std::string(c10::toString(t)));
  }
}

torch::ScalarType dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat32;
  if (s == "f64") return torch::kFloat64;
  if (s == "i64") return torch::kInt64;
  if (s == "i32") return torch::kInt32;
  if (s == "u8") return torch::kUInt8;
  if (s == "bool") return torch::kBool;
  throw IoError("archive: unknown dtype '" + s + "'");
}

}  // namespace

void Archive::put(const std::string& name, const torch::Tensor& tensor) {
  arrays_[name] = tensor.detach().to(torch::kCPU).contiguous().clone();
}

void Archive::put(const std::string& name, const Eigen::MatrixXd& matrix) {
  // Row-major on disk so the array reads naturally as [rows, cols].
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = matrix;
  auto t = torch::from_blob(rm.data(), {rm.rows(), rm.cols()}, torch::kFloat64);
  put(name, t);
}

void Archive::put(const std::string& name, const Eigen::VectorXd& vector) {
  Eigen::VectorXd copy = vector;
  put(name, torch::from_blob(copy.data(), {copy.size()}, torch::kFloat64));
}

bool Archive::contains(const std::string& name) const { return arrays_.contains(name); }

torch::Tensor Archive::tensor(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw IoError("archive: missing array '" + name + "'");
  return it->second;
}

Eigen::MatrixXd Archive::matrix(const std::string& name) const {
  auto t = tensor(name).to(torch::kFloat64).contiguous();
  if (t.dim() != 2) throw IoError("archive: '" + name + "' is not a matrix");
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      t.data_ptr<double>(), t.size(0), t.size(1));
  return m;
}

Eigen::VectorXd Archive::vector(const std::string& name) const {
  auto t = tensor(name).to(torch::kFloat64).contiguous().reshape({-1});
  return Eigen::Map<const Eigen::VectorXd>(t.data_ptr<double>(), t.numel());
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  out.reserve(arrays_.size());
  for (const auto& [k, v] : arrays_) out.push_back(k);
  return out;
}

void Archive::put_module(const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(true)) put(prefix + p.key(), p.value());
  for (const auto& b : module.named_buffers(true)) put(prefix + b.key(), b.value());
}

void Archive::load_module(const std::string& prefix, torch::nn::Module& module) const {
  torch::NoGradGuard guard;
  auto assign = [&](const std::string& key, torch::Tensor& dst) {
    auto src = tensor(prefix + key);
    if (src.sizes() != dst.sizes())
      throw IoError("archive: shape mismatch for '" + prefix + key + "'");
    dst.copy_(src);
  };
  for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
}

void Archive::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : arrays_) {
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    header["arrays"].push_back({{"name", name},
                                {"dtype", dtype_name(t.scalar_type())},
                                {"shape", t.sizes().vec()},
                                {"offset", offset},
                                {"nbytes", nbytes}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::string blob;
  blob.reserve(16 + text.size() + offset);
  blob.append(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  blob.append(reinterpret_cast<const char*>(&len), sizeof(len));
  blob.append(text);
  for (const auto& [name, t] : arrays_)
    blob.append(static_cast<const char*>(t.data_ptr()), t.numel() * t.element_size());
  atomic_write(path, blob);
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("archive: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw IoError("archive: bad magic in " + path.string());
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (16 + len > bytes.size()) throw IoError("archive: truncated header in " + path.string());
  auto header = nlohmann::json::parse(bytes.substr(16, len));
  const std::size_t base = 16 + len;

  Archive ar;
  ar.meta = header.at("meta");
  for (const auto& a : header.at("arrays")) {
    const auto offset = a.at("offset").get<std::uint64_t>();
    const auto nbytes = a.at("nbytes").get<std::uint64_t>();
    if (base + offset + nbytes > bytes.size())
      throw IoError("archive: truncated payload in " + path.string());
    auto shape = a.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(a.at("dtype"))));
    if (static_cast<std::uint64_t>(t.numel() * t.element_size()) != nbytes)
      throw IoError("archive: size mismatch for '" + a.at("name").get<std::string>() + "'");
    std::memcpy(t.data_ptr(), bytes.data() + base + offset, nbytes);
    ar.arrays_[a.at("name").get<std::string>()] = std::move(t);
  }
  return ar;
}

void atomic_write(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + ": " + ec.message());
}

}  // namespace dermagan
