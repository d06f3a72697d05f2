#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mixdiv/model.hpp"

namespace mixdiv {

namespace {

constexpr const char* kMagic = "MIXDIV1";

std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  }
}

std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

const std::string* Checkpoint::find(const std::string& key) const {
  for (const auto& [k, v] : config)
    if (k == key) return &v;
  return nullptr;
}

std::map<std::string, std::string> Checkpoint::config_map() const {
  return {config.begin(), config.end()};
}

void write_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << kMagic << '\n';
  for (const auto& [key, value] : checkpoint.config) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw ContractError("checkpoint config entry '" + key + "' cannot be written as a key = value line");
    }
    out << key << " = " << value << '\n';
  }
  out << '\n';
  for (const auto& [name, tensor] : checkpoint.tensors) {
    out << name;
    for (auto d : tensor.shape()) out << ' ' << d;
    out << '\n';
    for (float v : tensor.data()) {
      std::uint32_t bits = to_little_endian(std::bit_cast<std::uint32_t>(v));
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      out.write(bytes, 4);
    }
  }
  if (!out) throw IoError("failed while writing checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != kMagic) {
    throw FormatError(path + ":1: missing MIXDIV1 header");
  }
  Checkpoint ck;
  std::size_t line_no = 1;
  while (true) {
    if (!std::getline(in, line)) throw FormatError(path + ": unexpected end of file in config block");
    ++line_no;
    if (trim(line).empty()) break;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    ck.config.emplace_back(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream header(line);
    std::string name;
    header >> name;
    if (name.empty()) throw FormatError(path + ":" + std::to_string(line_no) + ": empty tensor header");
    Shape shape;
    std::size_t d;
    while (header >> d) shape.push_back(d);
    if (shape.empty()) throw FormatError(path + ":" + std::to_string(line_no) + ": tensor '" + name + "' has no dims");
    std::vector<float> values(shape_numel(shape));
    for (auto& v : values) {
      char bytes[4];
      if (!in.read(bytes, 4)) throw FormatError(path + ": truncated data for tensor '" + name + "'");
      std::uint32_t bits;
      std::memcpy(&bits, bytes, 4);
      v = std::bit_cast<float>(to_little_endian(bits));
    }
    ck.tensors.emplace_back(name, Tensor<float>::from(std::move(shape), std::move(values)));
  }
  return ck;
}

}  // namespace mixdiv
