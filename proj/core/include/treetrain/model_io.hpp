#pragma once

#include <string>

#include "treetrain/model.hpp"

namespace treetrain {

// Flat little-endian parameter file: 4-byte magic "TTPM", u32 header length,
// JSON header (config + ordered tensor name/offset/shape table), then raw
// tensor data. See README for the exact layout.
template <typename T>
void save_parameters(const Parameters<T>& params, const std::string& path);

template <typename T>
Parameters<T> load_parameters(const std::string& path);

extern template void save_parameters<float>(const Parameters<float>&, const std::string&);
extern template void save_parameters<double>(const Parameters<double>&, const std::string&);
extern template Parameters<float> load_parameters<float>(const std::string&);
extern template Parameters<double> load_parameters<double>(const std::string&);

}  // namespace treetrain
