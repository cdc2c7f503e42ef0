#pragma once

#include <span>
#include <string>

#include "mambacsr/tensor.hpp"

namespace mambacsr {

inline constexpr uint32_t kCheckpointVersion = 1;

// Layout: magic "MCSR", version u32 LE, parameter count u32 LE, then per
// parameter: name length u16 LE + UTF-8 name, dtype u8 (0=f32, 1=f64),
// rank u8, dims u64 LE, raw little-endian values.
template <typename T>
void save_checkpoint(const std::string& path,
                     std::span<Parameter<T>* const> params);

/// Strict: every stored name must match a provided parameter with identical
/// dtype and shape, and counts must agree.
template <typename T>
void load_checkpoint(const std::string& path,
                     std::span<Parameter<T>* const> params);

extern template void save_checkpoint<float>(const std::string&,
                                            std::span<Parameter<float>* const>);
extern template void save_checkpoint<double>(
    const std::string&, std::span<Parameter<double>* const>);
extern template void load_checkpoint<float>(const std::string&,
                                            std::span<Parameter<float>* const>);
extern template void load_checkpoint<double>(
    const std::string&, std::span<Parameter<double>* const>);

}  // namespace mambacsr
