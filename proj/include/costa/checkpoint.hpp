#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "costa/common.hpp"
#include "costa/encoder.hpp"
#include "costa/optimizer.hpp"

namespace costa {

static_assert(std::endian::native == std::endian::little, "container format assumes little-endian");

// Container file: 8-byte magic, 8-byte little-endian manifest length, JSON
// manifest, then row-major float32 tensor payloads in manifest order. Used
// for both encoder checkpoints and dense indexes.
namespace container {

constexpr char kMagic[8] = {'C', 'O', 'S', 'T', 'A', 'B', 'I', 'N'};
constexpr int kFormatVersion = 1;

inline void write(const std::string& path, const nlohmann::json& manifest,
                  const std::vector<float>& payload) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("IoError", "cannot write '" + path + "'");
    out.write(kMagic, sizeof(kMagic));
    const std::string m = manifest.dump();
    const uint64_t len = m.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(m.data(), static_cast<std::streamsize>(m.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw Error("IoError", "failed writing '" + path + "'");
}

struct Contents {
    nlohmann::json manifest;
    std::vector<float> payload;
};

inline Contents read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("IoError", "cannot read '" + path + "'");
    char magic[8];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0)
        throw Error("BadContainer", "'" + path + "' is not a container file");
    uint64_t len = 0;
    if (!in.read(reinterpret_cast<char*>(&len), sizeof(len)))
        throw Error("TruncatedFile", "'" + path + "' ends inside the header");
    std::string m(len, '\0');
    if (!in.read(m.data(), static_cast<std::streamsize>(len)))
        throw Error("TruncatedFile", "'" + path + "' ends inside the manifest");
    Contents c;
    try {
        c.manifest = nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw Error("BadContainer", std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!c.manifest.contains("format_version") || c.manifest["format_version"] != kFormatVersion)
        throw Error("UnsupportedVersion", "'" + path + "' has an unsupported format version");
    std::vector<char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
    if (bytes.size() % sizeof(float) != 0)
        throw Error("TruncatedFile", "'" + path + "' payload is not a whole number of floats");
    c.payload.resize(bytes.size() / sizeof(float));
    std::memcpy(c.payload.data(), bytes.data(), bytes.size());
    return c;
}

}  // namespace container

// Stable identity of a set of encoder weights: FNV-1a over names, shapes and
// float32 payloads in name order. Optimizer state does not participate.
inline uint64_t fingerprint(const ParamStore<float>& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const void* p, size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& [name, t] : params.tensors) {
        feed(name.data(), name.size());
        for (int64_t d : t.shape) feed(&d, sizeof(d));
        feed(t.data.data(), t.data.size() * sizeof(float));
    }
    return h;
}

inline std::string to_hex(uint64_t x) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(x));
    return buf;
}

inline uint64_t from_hex(const std::string& s) { return std::stoull(s, nullptr, 16); }

namespace detail {

inline nlohmann::json encoder_config_to_json(const EncoderConfig& c) {
    return {{"layers", c.layers}, {"heads", c.heads},     {"hidden", c.hidden}, {"ffn", c.ffn},
            {"vocab", c.vocab},   {"max_len", c.max_len}, {"dropout", c.dropout}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.hidden = j.at("hidden").get<int>();
    c.ffn = j.at("ffn").get<int>();
    c.vocab = j.at("vocab").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.dropout = j.at("dropout").get<double>();
    return c;
}

}  // namespace detail

struct Checkpoint {
    ParamStore<float> params;
    std::optional<AdamState<float>> adam;
    std::optional<std::array<uint64_t, 4>> rng;
    nlohmann::json meta;
};

inline void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                            const AdamState<float>* adam = nullptr,
                            const std::array<uint64_t, 4>* rng = nullptr,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json manifest;
    manifest["format_version"] = container::kFormatVersion;
    manifest["kind"] = "checkpoint";
    manifest["encoder"] = detail::encoder_config_to_json(params.config);
    manifest["meta"] = meta;

    std::vector<float> payload;
    nlohmann::json tensors = nlohmann::json::array();
    auto append = [&](const std::string& name, const Tensor<float>& t) {
        tensors.push_back({{"name", name},
                           {"shape", t.shape},
                           {"offset", payload.size() * sizeof(float)}});
        payload.insert(payload.end(), t.data.begin(), t.data.end());
    };
    for (const auto& [name, t] : params.tensors) append(name, t);
    if (adam) {
        manifest["optimizer"] = {{"step", adam->step}};
        for (const auto& [name, t] : adam->m) append("adam.m." + name, t);
        for (const auto& [name, t] : adam->v) append("adam.v." + name, t);
    } else {
        manifest["optimizer"] = nullptr;
    }
    if (rng) {
        nlohmann::json r = nlohmann::json::array();
        for (uint64_t w : *rng) r.push_back(to_hex(w));
        manifest["rng"] = r;
    } else {
        manifest["rng"] = nullptr;
    }
    manifest["tensors"] = tensors;
    container::write(path, manifest, payload);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto c = container::read(path);
    if (c.manifest.value("kind", "") != "checkpoint")
        throw Error("BadCheckpoint", "'" + path + "' is not a checkpoint");
    Checkpoint ck;
    ck.params.config = detail::encoder_config_from_json(c.manifest.at("encoder"));
    ck.params.config.validate();
    ck.meta = c.manifest.value("meta", nlohmann::json::object());

    std::map<std::string, Tensor<float>> loaded;
    for (const auto& entry : c.manifest.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        Tensor<float> t;
        t.shape = entry.at("shape").get<std::vector<int64_t>>();
        const uint64_t off = entry.at("offset").get<uint64_t>();
        const int64_t n = Tensor<float>::numel(t.shape);
        if (off % sizeof(float) != 0 ||
            off / sizeof(float) + static_cast<uint64_t>(n) > c.payload.size())
            throw Error("TruncatedFile", "tensor '" + name + "' extends past the end of '" + path + "'");
        t.data.assign(c.payload.begin() + static_cast<int64_t>(off / sizeof(float)),
                      c.payload.begin() + static_cast<int64_t>(off / sizeof(float)) + n);
        loaded.emplace(name, std::move(t));
    }

    const auto expected = ParamStore<float>::expected_shapes(ck.params.config);
    for (const auto& [name, shape] : expected) {
        auto it = loaded.find(name);
        if (it == loaded.end()) throw Error("MissingTensor", "checkpoint lacks tensor '" + name + "'");
        if (it->second.shape != shape)
            throw Error("ShapeMismatch", "tensor '" + name + "' does not match the stored config");
        ck.params.tensors.emplace(name, std::move(it->second));
    }

    if (!c.manifest.at("optimizer").is_null()) {
        AdamState<float> adam;
        adam.step = c.manifest.at("optimizer").at("step").get<int64_t>();
        for (const auto& [name, shape] : expected) {
            for (const char* kind : {"m", "v"}) {
                const std::string key = std::string("adam.") + kind + "." + name;
                auto it = loaded.find(key);
                if (it == loaded.end())
                    throw Error("MissingTensor", "checkpoint lacks optimizer tensor '" + key + "'");
                if (it->second.shape != shape)
                    throw Error("ShapeMismatch", "tensor '" + key + "' does not match the stored config");
                (*(kind[0] == 'm' ? &adam.m : &adam.v)).emplace(name, std::move(it->second));
            }
        }
        ck.adam = std::move(adam);
    }
    if (!c.manifest.at("rng").is_null()) {
        std::array<uint64_t, 4> r{};
        const auto& jr = c.manifest.at("rng");
        if (!jr.is_array() || jr.size() != 4) throw Error("BadCheckpoint", "malformed rng state");
        for (size_t i = 0; i < 4; ++i) r[i] = from_hex(jr[i].get<std::string>());
        ck.rng = r;
    }
    return ck;
}

}  // namespace costa
