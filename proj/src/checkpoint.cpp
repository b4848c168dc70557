#include "cec/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

namespace cec {

namespace {

static_assert(sizeof(float) == 4);

void append_le(std::vector<unsigned char>& blob, const float* values,
               std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &values[i], 4);
    if constexpr (std::endian::native == std::endian::big)
      bits = __builtin_bswap32(bits);
    blob.push_back(static_cast<unsigned char>(bits & 0xff));
    blob.push_back(static_cast<unsigned char>((bits >> 8) & 0xff));
    blob.push_back(static_cast<unsigned char>((bits >> 16) & 0xff));
    blob.push_back(static_cast<unsigned char>((bits >> 24) & 0xff));
  }
}

void read_le(const std::vector<unsigned char>& blob, std::size_t offset,
             float* out, std::size_t count) {
  if (offset + 4 * count > blob.size())
    throw std::runtime_error("checkpoint blob truncated");
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* p = blob.data() + offset + 4 * i;
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                         (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) |
                         (static_cast<std::uint32_t>(p[3]) << 24);
    if constexpr (std::endian::native == std::endian::big)
      bits = __builtin_bswap32(bits);
    std::memcpy(&out[i], &bits, 4);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

void save_checkpoint(Model<float>& model, const std::string& prefix) {
  std::vector<unsigned char> blob;
  std::ostringstream manifest;
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx",
                static_cast<unsigned long long>(model.spec.hash()));
  manifest << "cec-checkpoint v1\nspec_hash " << hex << "\n";

  for (auto& [name, t] : model.parameters()) {
    manifest << "param " << name << " " << t->shape.n << " " << t->shape.c
             << " " << t->shape.h << " " << t->shape.w << " " << blob.size()
             << " " << t->numel() << "\n";
    append_le(blob, t->data.data(), t->data.size());
  }
  for (auto& [name, buf] : model.buffers()) {
    manifest << "buffer " << name << " " << buf->size() << " " << blob.size()
             << "\n";
    append_le(blob, buf->data(), buf->size());
  }

  {
    std::ofstream f(prefix + ".manifest", std::ios::binary);
    f << manifest.str();
    if (!f) throw std::runtime_error("cannot write " + prefix + ".manifest");
  }
  {
    std::ofstream f(prefix + ".bin", std::ios::binary);
    f.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size()));
    if (!f) throw std::runtime_error("cannot write " + prefix + ".bin");
  }
  {
    std::ofstream f(prefix + ".spec", std::ios::binary);
    f << model.spec.serialize();
    if (!f) throw std::runtime_error("cannot write " + prefix + ".spec");
  }
}

std::uint64_t checkpoint_spec_hash(const std::string& prefix) {
  std::istringstream is(read_file(prefix + ".manifest"));
  std::string line;
  std::getline(is, line);
  if (line != "cec-checkpoint v1")
    throw std::runtime_error("unrecognized checkpoint manifest");
  std::string tag, hex;
  is >> tag >> hex;
  if (tag != "spec_hash")
    throw std::runtime_error("checkpoint manifest missing spec hash");
  return std::stoull(hex, nullptr, 16);
}

Model<float> load_checkpoint(const std::string& prefix) {
  const ArchitectureSpec spec =
      ArchitectureSpec::parse(read_file(prefix + ".spec"));
  if (spec.hash() != checkpoint_spec_hash(prefix))
    throw std::runtime_error(
        "checkpoint spec hash does not match its architecture document");

  Model<float> model = build_network<float>(spec, 0);
  const std::string blob_str = read_file(prefix + ".bin");
  std::vector<unsigned char> blob(blob_str.begin(), blob_str.end());

  auto params = model.parameters();
  auto buffers = model.buffers();
  std::size_t pi = 0, bi = 0;

  std::istringstream is(read_file(prefix + ".manifest"));
  std::string line;
  std::getline(is, line);  // header
  std::getline(is, line);  // spec_hash
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind, name;
    ls >> kind >> name;
    if (kind == "param") {
      std::int64_t n, c, h, w;
      std::size_t offset, count;
      ls >> n >> c >> h >> w >> offset >> count;
      if (pi >= params.size() || params[pi].first != name)
        throw std::runtime_error("checkpoint parameter order mismatch at " +
                                 name);
      auto& t = params[pi].second;
      if (!(t->shape == Shape{n, c, h, w}))
        throw std::runtime_error("checkpoint shape mismatch for " + name);
      read_le(blob, offset, t->data.data(), count);
      ++pi;
    } else if (kind == "buffer") {
      std::size_t len, offset;
      ls >> len >> offset;
      if (bi >= buffers.size() || buffers[bi].first != name)
        throw std::runtime_error("checkpoint buffer order mismatch at " +
                                 name);
      auto* buf = buffers[bi].second;
      if (buf->size() != len)
        throw std::runtime_error("checkpoint buffer length mismatch for " +
                                 name);
      read_le(blob, offset, buf->data(), len);
      ++bi;
    } else {
      throw std::runtime_error("unknown checkpoint entry kind: " + kind);
    }
  }
  if (pi != params.size() || bi != buffers.size())
    throw std::runtime_error("checkpoint is missing entries");
  return model;
}

Model<float> load_checkpoint_checked(const std::string& prefix,
                                     std::uint64_t expected_hash) {
  if (checkpoint_spec_hash(prefix) != expected_hash)
    throw std::runtime_error("checkpoint spec hash mismatch");
  return load_checkpoint(prefix);
}

}  // namespace cec
