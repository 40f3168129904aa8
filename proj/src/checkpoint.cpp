#include "pssl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pssl {

namespace {

constexpr std::string_view kMagic = "PSSL1\n";

bool valid_token(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (c == ' ' || c == '\n' || c == '\t' || c == '\r') return false;
    return true;
}

void put_f32(std::string& out, float v) {
    const auto u = std::bit_cast<std::uint32_t>(v);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

float get_f32(const char* p) {
    std::uint32_t u = 0;
    for (int i = 0; i < 4; ++i) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return std::bit_cast<float>(u);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::string out(kMagic);
    for (const auto& [k, v] : ckpt.meta) {
        if (!valid_token(k)) throw IoError("checkpoint meta key '" + k + "' is empty or contains whitespace");
        if (v.find('\n') != std::string::npos) throw IoError("checkpoint meta value for " + k + " contains a newline");
        out += "meta " + k + " " + v + "\n";
    }
    std::size_t offset = 0;
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const auto& t = ckpt.tensors[i];
        const std::string& name = ckpt.tensors.name(i);
        if (!valid_token(name)) throw IoError("checkpoint tensor name '" + name + "' is empty or contains whitespace");
        out += "tensor " + name + " " + std::to_string(t.ndim());
        for (std::size_t d : t.shape()) out += " " + std::to_string(d);
        out += " " + std::to_string(offset) + "\n";
        offset += 4 * t.size();
    }
    out += "end\n";
    out.reserve(out.size() + offset);
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i)
        for (float v : ckpt.tensors[i].values()) put_f32(out, v);
    return out;
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    if (bytes.substr(0, kMagic.size()) != kMagic) throw IoError("not a checkpoint (bad magic)");
    Checkpoint ckpt;
    std::size_t pos = kMagic.size();
    struct Entry {
        std::string name;
        Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    bool ended = false;
    while (pos < bytes.size()) {
        const std::size_t nl = bytes.find('\n', pos);
        if (nl == std::string_view::npos) throw IoError("checkpoint header is truncated");
        const std::string line(bytes.substr(pos, nl - pos));
        pos = nl + 1;
        if (line == "end") {
            ended = true;
            break;
        }
        if (line.rfind("meta ", 0) == 0) {
            const std::size_t sp = line.find(' ', 5);
            if (sp == std::string::npos) throw IoError("malformed checkpoint meta line: " + line);
            ckpt.meta[line.substr(5, sp - 5)] = line.substr(sp + 1);
        } else if (line.rfind("tensor ", 0) == 0) {
            std::istringstream is(line.substr(7));
            Entry e;
            std::size_t ndim = 0;
            if (!(is >> e.name >> ndim)) throw IoError("malformed checkpoint tensor line: " + line);
            e.shape.resize(ndim);
            for (auto& d : e.shape)
                if (!(is >> d)) throw IoError("malformed checkpoint tensor line: " + line);
            if (!(is >> e.offset)) throw IoError("malformed checkpoint tensor line: " + line);
            std::string extra;
            if (is >> extra) throw IoError("malformed checkpoint tensor line: " + line);
            entries.push_back(std::move(e));
        } else {
            throw IoError("unexpected checkpoint header line: " + line);
        }
    }
    if (!ended) throw IoError("checkpoint header has no end marker");
    const std::string_view payload = bytes.substr(pos);
    std::size_t expected = 0;
    for (const Entry& e : entries) {
        const std::size_t n = shape_numel(e.shape);
        if (e.offset != expected) throw IoError("checkpoint tensor " + e.name + " has a non-contiguous offset");
        if (e.offset + 4 * n > payload.size()) throw IoError("checkpoint payload is truncated at " + e.name);
        const std::size_t id = ckpt.tensors.add(e.name, e.shape);
        auto& vals = ckpt.tensors[id].values();
        for (std::size_t j = 0; j < n; ++j) vals[j] = get_f32(payload.data() + e.offset + 4 * j);
        expected += 4 * n;
    }
    if (expected != payload.size()) throw IoError("checkpoint payload has trailing bytes");
    return ckpt;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw DataError("checkpoint not found: " + path.string());
    return parse_checkpoint(read_file(path));
}

ParamSet<float> extract_params(const Checkpoint& ckpt, const std::string& prefix) {
    ParamSet<float> out;
    for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const std::string& n = ckpt.tensors.name(i);
        if (n.rfind(prefix, 0) == 0) {
            const std::size_t id = out.add(n.substr(prefix.size()), ckpt.tensors[i].shape());
            out[id] = ckpt.tensors[i];
        }
    }
    return out;
}

}  // namespace pssl
