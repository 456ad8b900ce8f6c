#include "poolbert/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "poolbert/error.hpp"

namespace poolbert {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'R', 'T'};
constexpr std::uint32_t kMaxRank = 8;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(source_ + ": " + msg + " (at byte " + std::to_string(pos_) + ")");
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) fail(std::string("truncated checkpoint while reading ") + what);
  }

  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const Model& model) {
  Checkpoint c{model.config(), {}};
  for (const NamedTensor& p : model.parameters()) c.tensors.push_back({p.name, p.tensor.clone()});
  return c;
}

void write_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::string out(kMagic, 4);
  put_u32(out, Checkpoint::kVersion);
  const std::string config = checkpoint.config.to_text();
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out += config;
  put_u32(out, static_cast<std::uint32_t>(checkpoint.tensors.size()));
  for (const NamedTensor& t : checkpoint.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.tensor.rank()));
    for (std::size_t d : t.tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (real v : t.tensor.data()) put_f32(out, static_cast<float>(v));
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw InputError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(bytes, path.string());

  if (r.bytes(4, "magic") != std::string(kMagic, 4)) r.fail("not a checkpoint (bad magic)");
  const std::uint32_t version = r.u32("version");
  if (version != Checkpoint::kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t config_len = r.u32("config length");
  const std::string config_text = r.bytes(config_len, "config");

  Checkpoint c;
  try {
    c.config = ModelConfig::from_text(config_text, path.string() + " (embedded config)");
  } catch (const Error& e) {
    r.fail(std::string("invalid embedded config: ") + e.what());
  }

  const std::uint32_t count = r.u32("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("tensor name length");
    std::string name = r.bytes(name_len, "tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > kMaxRank) r.fail("tensor " + name + " has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape[d] = r.u32("tensor dimension");
      numel *= shape[d];
    }
    if (numel > r.remaining() / 4) r.fail("truncated payload for tensor " + name);
    const std::string payload = r.bytes(numel * 4, "tensor payload");
    std::vector<real> values(numel);
    for (std::size_t k = 0; k < numel; ++k) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[4 * k + b])) << (8 * b);
      }
      values[k] = static_cast<real>(std::bit_cast<float>(bits));
    }
    for (const NamedTensor& existing : c.tensors) {
      if (existing.name == name) r.fail("duplicate tensor " + name);
    }
    c.tensors.push_back({std::move(name), Tensor::from(std::move(shape), std::move(values))});
  }
  if (!r.at_end()) r.fail("trailing bytes after last tensor");
  return c;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_checkpoint(make_checkpoint(model), path);
}

Model load_checkpoint(const std::filesystem::path& path) {
  Checkpoint c = read_checkpoint(path);
  Model m(c.config);
  m.load_state(c.tensors);
  return m;
}

Model load_checkpoint_as(const std::filesystem::path& path, const ModelConfig& config) {
  Checkpoint c = read_checkpoint(path);
  Model m(config);
  m.load_state(c.tensors);
  return m;
}

}  // namespace poolbert
