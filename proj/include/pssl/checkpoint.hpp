#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "pssl/params.hpp"

namespace pssl {

/// Magic `PSSL1\n`, `meta key value` lines, `tensor name ndim dims... offset`
/// lines, `end\n`, then little-endian float32 payloads (offsets in bytes).
struct Checkpoint {
    std::map<std::string, std::string> meta;
    ParamSet<float> tensors;
};

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::string_view bytes);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Tensors of `ckpt` whose name starts with `prefix`, prefix stripped.
ParamSet<float> extract_params(const Checkpoint& ckpt, const std::string& prefix);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace pssl
