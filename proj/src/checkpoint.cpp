// Checkpoint file layout (all integers little-endian):
//
//   offset 0   magic "RLAB"
//   offset 4   u32 format version (1)
//   offset 8   u64 header length in bytes
//   offset 16  UTF-8 JSON header, right-padded with spaces so the payload
//              starts on an 8-byte boundary
//   payload    raw little-endian f32 tensors in header order, each starting
//              8-byte aligned (zero padding between tensors)
//
// The header maps each canonical parameter name to
// {"dtype": "f32", "shape": [...], "offset": <byte offset into payload>}
// plus one reserved "__metadata__" entry holding the model config.

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "relab/model.hpp"

namespace relab {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'L', 'A', 'B'};
constexpr std::uint32_t kVersion = 1;
constexpr std::size_t kPrefixBytes = 16;

std::size_t align8(std::size_t n) { return (n + 7) & ~std::size_t{7}; }

template <typename U>
void put(std::string& out, U value) {
  char buf[sizeof(U)];
  std::memcpy(buf, &value, sizeof(U));
  out.append(buf, sizeof(U));
}

template <typename U>
U get(const std::string& in, std::size_t offset) {
  U value;
  std::memcpy(&value, in.data() + offset, sizeof(U));
  return value;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  checkpoint.validate();
  nlohmann::ordered_json header;
  header["__metadata__"] = {{"format", "relab-checkpoint"}, {"config", nlohmann::json(checkpoint.config)}};
  std::size_t offset = 0;
  const auto names = canonical_names(checkpoint.config);
  for (const auto& name : names) {
    const auto& t = checkpoint.params.at(name);
    header[name] = {{"dtype", "f32"}, {"shape", t.shape()}, {"offset", offset}};
    offset = align8(offset + t.size() * sizeof(float));
  }
  std::string header_text = header.dump();
  header_text.resize(align8(kPrefixBytes + header_text.size()) - kPrefixBytes, ' ');

  std::string bytes;
  bytes.reserve(kPrefixBytes + header_text.size() + offset);
  bytes.append(kMagic, 4);
  put<std::uint32_t>(bytes, kVersion);
  put<std::uint64_t>(bytes, header_text.size());
  bytes += header_text;
  for (const auto& name : names) {
    const auto& t = checkpoint.params.at(name);
    bytes.append(reinterpret_cast<const char*>(t.data().data()), t.size() * sizeof(float));
    bytes.resize(align8(bytes.size()), '\0');
  }

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::string where = path.string() + ": ";

  if (bytes.size() < kPrefixBytes) {
    throw ParseError(where + "file is " + std::to_string(bytes.size()) + " bytes, shorter than the 16-byte prefix");
  }
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw ParseError(where + "bad magic at offset 0");
  const auto version = get<std::uint32_t>(bytes, 4);
  if (version != kVersion) {
    throw ParseError(where + "unsupported version " + std::to_string(version) + " at offset 4");
  }
  const auto header_len = get<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - kPrefixBytes) {
    throw ParseError(where + "header length " + std::to_string(header_len) + " at offset 8 exceeds file size " +
                     std::to_string(bytes.size()));
  }
  if ((kPrefixBytes + header_len) % 8 != 0) {
    throw ParseError(where + "header length " + std::to_string(header_len) + " leaves payload unaligned");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(kPrefixBytes, header_len));
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(where + "header JSON: " + e.what());
  }
  if (!header.is_object() || !header.contains("__metadata__")) {
    throw ParseError(where + "header field __metadata__ missing");
  }

  Checkpoint ck;
  try {
    ck.config = header.at("__metadata__").at("config").get<ModelConfig>();
    ck.config.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "header field __metadata__.config: " + e.what());
  } catch (const InvalidArgument& e) {
    throw ParseError(where + "header field __metadata__.config: " + e.what());
  }

  const std::size_t payload_start = kPrefixBytes + header_len;
  const std::size_t payload_len = bytes.size() - payload_start;
  const auto names = canonical_names(ck.config);
  if (header.size() != names.size() + 1) {
    for (const auto& [key, value] : header.items()) {
      if (key != "__metadata__" && std::find(names.begin(), names.end(), key) == names.end()) {
        throw ParseError(where + "header field " + key + " is not a canonical parameter name");
      }
    }
  }
  std::size_t expected_end = 0;
  for (const auto& name : names) {
    if (!header.contains(name)) throw ParseError(where + "header field " + name + " missing");
    const auto& entry = header.at(name);
    Shape shape;
    std::size_t offset = 0;
    try {
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw ParseError(where + "header field " + name + ".dtype must be \"f32\"");
      }
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + "header field " + name + ": " + e.what());
    }
    const auto want = canonical_shape(ck.config, name);
    if (shape != want) {
      throw ParseError(where + "header field " + name + ".shape " + shape_to_string(shape) +
                       " disagrees with config shape " + shape_to_string(want));
    }
    if (offset != expected_end) {
      throw ParseError(where + "header field " + name + ".offset " + std::to_string(offset) + ", expected " +
                       std::to_string(expected_end));
    }
    const std::size_t nbytes = shape_size(shape) * sizeof(float);
    if (offset + nbytes > payload_len) {
      throw ParseError(where + "payload for " + name + " at offset " + std::to_string(payload_start + offset) +
                       " needs " + std::to_string(nbytes) + " bytes but only " +
                       std::to_string(payload_len > offset ? payload_len - offset : 0) + " remain");
    }
    std::vector<float> data(shape_size(shape));
    std::memcpy(data.data(), bytes.data() + payload_start + offset, nbytes);
    ck.params.emplace(name, Tensor<float>(shape, std::move(data)));
    expected_end = align8(offset + nbytes);
  }
  if (payload_len != expected_end) {
    throw ParseError(where + "payload is " + std::to_string(payload_len) + " bytes, header declares " +
                     std::to_string(expected_end));
  }
  return ck;
}

}  // namespace relab
