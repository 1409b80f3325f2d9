#include "bevflow/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace bevflow {

namespace {
constexpr char kMagic[8] = {'B', 'I', 'F', 'T', '0', '0', '0', '1'};
}

void save_checkpoint(const std::string& path, const std::vector<Parameter>& params) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint for writing: " + path);
    f.write(kMagic, 8);
    f.put('\n');
    std::ostringstream header;
    int64_t offset = 0;
    for (const auto& p : params) {
        header << p.name << " " << p.value.rank();
        for (int64_t d : p.value.shape()) header << " " << d;
        header << " " << offset << "\n";
        offset += p.value.numel() * static_cast<int64_t>(sizeof(float));
    }
    header << "DATA\n";
    const std::string h = header.str();
    f.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& p : params) {
        f.write(reinterpret_cast<const char*>(p.value.data().data()),
                static_cast<std::streamsize>(p.value.numel() * sizeof(float)));
    }
    if (!f) throw FormatError("checkpoint write failed: " + path);
}

namespace {

struct ParsedHeader {
    std::vector<ManifestEntry> entries;
    int64_t payload_start = 0;
};

ParsedHeader parse_header(std::ifstream& f, const std::string& path) {
    char magic[9] = {0};
    f.read(magic, 8);
    if (f.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
        throw FormatError("bad checkpoint magic at byte 0 in " + path);
    }
    char nl;
    f.get(nl);
    ParsedHeader out;
    std::string line;
    while (std::getline(f, line)) {
        if (line == "DATA") {
            out.payload_start = static_cast<int64_t>(f.tellg());
            return out;
        }
        std::istringstream ls(line);
        ManifestEntry e;
        int rank = 0;
        if (!(ls >> e.name >> rank) || rank < 0) {
            throw FormatError("bad manifest line in " + path + ": '" + line + "'");
        }
        e.shape.resize(static_cast<size_t>(rank));
        for (auto& d : e.shape) {
            if (!(ls >> d)) throw FormatError("bad manifest dims in " + path + ": '" + line + "'");
        }
        if (!(ls >> e.offset)) throw FormatError("bad manifest offset in " + path + ": '" + line + "'");
        out.entries.push_back(std::move(e));
    }
    throw FormatError("checkpoint header missing DATA terminator in " + path);
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint: " + path);
    return parse_header(f, path).entries;
}

std::vector<Parameter> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open checkpoint: " + path);
    ParsedHeader h = parse_header(f, path);
    std::vector<Parameter> out;
    out.reserve(h.entries.size());
    for (const auto& e : h.entries) {
        const int64_t n = numel_of(e.shape);
        std::vector<float> data(static_cast<size_t>(n));
        f.seekg(h.payload_start + e.offset);
        f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (f.gcount() != static_cast<std::streamsize>(n * sizeof(float))) {
            throw FormatError("truncated checkpoint payload for '" + e.name + "' at byte " +
                              std::to_string(h.payload_start + e.offset) + " in " + path);
        }
        out.push_back({e.name, Tensor(e.shape, std::move(data), true)});
    }
    return out;
}

void load_into(const std::string& path, std::vector<Parameter>& params) {
    auto loaded = load_checkpoint(path);
    std::map<std::string, Tensor> by_name;
    for (auto& p : loaded) by_name.emplace(p.name, p.value);
    if (by_name.size() != params.size()) {
        throw FormatError("checkpoint " + path + " holds " + std::to_string(by_name.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
    }
    for (auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end()) throw FormatError("checkpoint missing parameter '" + p.name + "'");
        if (it->second.shape() != p.value.shape()) {
            throw FormatError("checkpoint shape mismatch for '" + p.name + "': " +
                              shape_str(it->second.shape()) + " vs " + shape_str(p.value.shape()));
        }
        p.value.mutable_data() = it->second.data();
    }
}

}  // namespace bevflow
