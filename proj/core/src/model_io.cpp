#include "treetrain/model_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "parameter files are little-endian; big-endian hosts are unsupported");

namespace treetrain {
namespace {

constexpr char kMagic[4] = {'T', 'T', 'P', 'M'};

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
          {"d_ff", c.d_ff},             {"max_position", c.max_position},
          {"precision", to_string(c.precision)}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_position = j.at("max_position").get<std::size_t>();
  c.precision = precision_from_string(j.at("precision").get<std::string>());
  return c;
}

template <typename T>
const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

}  // namespace

template <typename T>
void save_parameters(const Parameters<T>& params, const std::string& path) {
  nlohmann::ordered_json header;
  header["config"] = config_to_json(params.config);
  header["dtype"] = dtype_name<T>();
  nlohmann::ordered_json table = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for_each_tensor(params, [&](const std::string& name, const std::vector<T>& data,
                              const std::vector<std::size_t>& shape) {
    table.push_back({{"name", name}, {"offset", offset}, {"shape", shape}});
    offset += data.size() * sizeof(T);
  });
  header["tensors"] = std::move(table);
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_parameters: cannot open " + path);
  f.write(kMagic, 4);
  const std::uint32_t hlen = std::uint32_t(hs.size());
  f.write(reinterpret_cast<const char*>(&hlen), 4);
  f.write(hs.data(), std::streamsize(hs.size()));
  for_each_tensor(params, [&](const std::string&, const std::vector<T>& data,
                              const std::vector<std::size_t>&) {
    f.write(reinterpret_cast<const char*>(data.data()),
            std::streamsize(data.size() * sizeof(T)));
  });
  if (!f) throw std::runtime_error("save_parameters: write failed for " + path);
}

template <typename T>
Parameters<T> load_parameters(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_parameters: cannot open " + path);
  char magic[4];
  std::uint32_t hlen = 0;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&hlen), 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("load_parameters: bad magic in " + path);
  std::string hs(hlen, '\0');
  f.read(hs.data(), hlen);
  const nlohmann::json header = nlohmann::json::parse(hs);
  const ModelConfig cfg = config_from_json(header.at("config"));
  if (header.at("dtype").get<std::string>() != dtype_name<T>())
    throw std::runtime_error("load_parameters: dtype mismatch in " + path);

  Parameters<T> params = zero_parameters<T>(cfg);
  std::size_t idx = 0;
  const auto& table = header.at("tensors");
  for_each_tensor(params, [&](const std::string& name, std::vector<T>& data,
                              const std::vector<std::size_t>& shape) {
    const auto& entry = table.at(idx++);
    if (entry.at("name").get<std::string>() != name)
      throw std::runtime_error("load_parameters: unexpected tensor order at " + name);
    const auto fshape = entry.at("shape").get<std::vector<std::size_t>>();
    if (fshape != shape)
      throw std::runtime_error("load_parameters: shape mismatch for " + name);
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * sizeof(T)));
  });
  if (!f) throw std::runtime_error("load_parameters: truncated file " + path);
  return params;
}

template void save_parameters<float>(const Parameters<float>&, const std::string&);
template void save_parameters<double>(const Parameters<double>&, const std::string&);
template Parameters<float> load_parameters<float>(const std::string&);
template Parameters<double> load_parameters<double>(const std::string&);

}  // namespace treetrain
