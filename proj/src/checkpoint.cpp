#include <cstring>
#include <fstream>

#include "trojanlm/digest.hpp"
#include "trojanlm/models.hpp"

namespace trojanlm::models {

namespace {

constexpr char kMagic[8] = {'T', 'J', 'L', 'M', 'C', 'K', 'P', 'T'};

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<uint8_t>& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

class Reader {
 public:
  explicit Reader(std::span<const uint8_t> b) : b_(b) {}
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  size_t remaining() const { return b_.size() - pos_; }

 private:
  void need(size_t n) const {
    if (b_.size() - pos_ < n) throw CheckpointError("corrupt checkpoint: truncated");
  }
  std::span<const uint8_t> b_;
  size_t pos_ = 0;
};

}  // namespace

std::vector<uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<uint8_t> out(kMagic, kMagic + 8);
  put_u32(out, kCheckpointVersion);
  const std::string meta = ckpt.meta.dump();
  put_u32(out, static_cast<uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) {
    put_u32(out, static_cast<uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<uint32_t>(t.value.rows));
    put_u32(out, static_cast<uint32_t>(t.value.cols));
    for (double v : t.value.data) put_f32(out, static_cast<float>(v));
  }
  Sha256 h;
  h.update(out.data(), out.size());
  const auto d = h.finish();
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

Checkpoint deserialize_checkpoint(std::span<const uint8_t> bytes) {
  if (bytes.size() < 8 + 4 + 32 || std::memcmp(bytes.data(), kMagic, 8) != 0)
    throw CheckpointError("corrupt checkpoint: bad header");
  const auto body = bytes.first(bytes.size() - 32);
  Sha256 h;
  h.update(body.data(), body.size());
  const auto d = h.finish();
  if (std::memcmp(d.data(), bytes.data() + body.size(), 32) != 0)
    throw CheckpointError("corrupt checkpoint: digest mismatch");
  Reader r(body.subspan(8));
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  try {
    ckpt.meta = nlohmann::json::parse(r.str(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("corrupt checkpoint: ") + e.what());
  }
  const uint32_t n = r.u32();
  for (uint32_t i = 0; i < n; ++i) {
    Tensor t;
    t.name = r.str(r.u32());
    const uint32_t rows = r.u32(), cols = r.u32();
    if (static_cast<uint64_t>(rows) * cols * 4 > r.remaining()) throw CheckpointError("corrupt checkpoint: truncated");
    t.value = Matrix(static_cast<int>(rows), static_cast<int>(cols));
    for (double& v : t.value.data) v = r.f32();
    ckpt.tensors.push_back(std::move(t));
  }
  if (r.remaining() != 0) throw CheckpointError("corrupt checkpoint: trailing bytes");
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp);
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void append_tensors(Checkpoint& ckpt, const ParameterSet& params, const std::string& prefix) {
  for (const auto& t : params.tensors()) ckpt.tensors.push_back({prefix + t.name, t.value});
}

ParameterSet extract_tensors(const Checkpoint& ckpt, const std::string& prefix) {
  ParameterSet p;
  for (const auto& t : ckpt.tensors) {
    if (t.name.rfind(prefix, 0) != 0) continue;
    const size_t i = p.add(t.name.substr(prefix.size()), t.value.rows, t.value.cols);
    p[i] = t.value;
  }
  if (p.count() == 0) throw CheckpointError("checkpoint has no tensors under '" + prefix + "'");
  return p;
}

GradcheckResult finite_difference_gradcheck(ParameterSet& params, const std::function<double(ParameterSet*)>& loss,
                                            size_t n_coords, double epsilon, Rng& rng) {
  ParameterSet grads = params.zeros_like();
  loss(&grads);
  GradcheckResult res;
  for (size_t c = 0; c < n_coords; ++c) {
    const size_t ti = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(params.count()) - 1));
    Matrix& m = params[ti];
    const size_t k = static_cast<size_t>(rng.uniform_int(0, static_cast<int>(m.size()) - 1));
    const double orig = m.data[k];
    m.data[k] = orig + epsilon;
    const double lp = loss(nullptr);
    m.data[k] = orig - epsilon;
    const double lm = loss(nullptr);
    m.data[k] = orig;
    const double numeric = (lp - lm) / (2.0 * epsilon);
    const double analytic = grads[ti].data[k];
    const double rel = std::abs(analytic - numeric) / std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
    res.max_relative_error = std::max(res.max_relative_error, rel);
    res.max_abs_analytic = std::max(res.max_abs_analytic, std::abs(analytic));
    ++res.coordinates;
  }
  return res;
}

}  // namespace trojanlm::models
