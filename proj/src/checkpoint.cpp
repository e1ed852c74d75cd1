#include "contraseq/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace contraseq {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace {

void write_u32(std::ostream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& in, const std::string& path) {
  uint32_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(v)))
    throw parse_error(path + ": truncated checkpoint");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw data_error("cannot write checkpoint: " + path);
  out.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));

  std::string config_block;
  for (const auto& [k, v] : model.config.to_kv()) config_block += k + "=" + v + "\n";
  write_u32(out, static_cast<uint32_t>(config_block.size()));
  out.write(config_block.data(), static_cast<std::streamsize>(config_block.size()));

  write_u32(out, static_cast<uint32_t>(model.params.size()));
  for (const auto& [name, tensor] : model.params) {
    write_u32(out, static_cast<uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<uint32_t>(tensor.rank()));
    for (int64_t d : tensor.shape()) write_u32(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.data().size() * sizeof(float)));
  }
  if (!out) throw data_error("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("cannot open checkpoint: " + path);

  std::string magic(kCheckpointMagic.size(), '\0');
  if (!in.read(magic.data(), static_cast<std::streamsize>(magic.size())) ||
      magic != kCheckpointMagic)
    throw parse_error(path + ": not a checkpoint file (bad magic)");

  const uint32_t config_len = read_u32(in, path);
  std::string config_block(config_len, '\0');
  if (!in.read(config_block.data(), config_len))
    throw parse_error(path + ": truncated config block");

  std::map<std::string, std::string> kv;
  std::istringstream cfg_in(config_block);
  std::string line;
  while (std::getline(cfg_in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw parse_error(path + ": bad config line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  Model model = build_model(ModelConfig::from_kv(kv), 0);

  const uint32_t count = read_u32(in, path);
  if (count != model.params.size())
    throw data_error(path + ": has " + std::to_string(count) + " tensors, model expects " +
                     std::to_string(model.params.size()));
  for (uint32_t t = 0; t < count; ++t) {
    const uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) throw parse_error(path + ": truncated tensor name");
    const uint32_t rank = read_u32(in, path);
    Shape shape(rank);
    for (uint32_t r = 0; r < rank; ++r) shape[r] = read_u32(in, path);

    auto& [expected_name, tensor] = model.params[t];
    if (name != expected_name)
      throw data_error(path + ": tensor " + std::to_string(t) + " is '" + name +
                       "', expected '" + expected_name + "'");
    if (shape != tensor.shape())
      throw data_error(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                       ", expected " + shape_str(tensor.shape()));
    if (!in.read(reinterpret_cast<char*>(tensor.mutable_data().data()),
                 static_cast<std::streamsize>(tensor.data().size() * sizeof(float))))
      throw parse_error(path + ": truncated tensor data for '" + name + "'");
  }
  return model;
}

}  // namespace contraseq
