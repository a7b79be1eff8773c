// Checkpoint format: an 8-byte little-endian header length, a JSON header
// (version, config, vocabulary, parameter manifest, optimizer flag, step),
// then a raw little-endian binary payload of parameter values in manifest
// order, optionally followed by Adam first/second moments in the same order.
// load(save(state)) reproduces forward passes exactly.

#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "edu/data.hpp"
#include "edu/model.hpp"
#include "edu/objectives.hpp"

namespace edu {

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& what) : std::runtime_error(what) {}
};

inline constexpr int kCheckpointVersion = 1;

// ---- config <-> JSON ---------------------------------------------------------

inline std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::ToT: return "tot";
        case Scheme::BoB: return "bob";
        case Scheme::GoG: return "gog";
        default: return "bgb";
    }
}
inline Scheme scheme_from_string(const std::string& s) {
    if (s == "tot") return Scheme::ToT;
    if (s == "bob") return Scheme::BoB;
    if (s == "gog") return Scheme::GoG;
    if (s == "bgb") return Scheme::BGB;
    throw DataError("unknown scheme '" + s + "' (expected tot, bob, gog, bgb)");
}

inline std::string to_string(Ablation a) {
    switch (a) {
        case Ablation::None: return "none";
        case Ablation::WithoutUL: return "wo_ul";
        case Ablation::EncoderDecoder: return "e_d";
        default: return "e";
    }
}
inline Ablation ablation_from_string(const std::string& s) {
    if (s == "none") return Ablation::None;
    if (s == "wo_ul") return Ablation::WithoutUL;
    if (s == "e_d") return Ablation::EncoderDecoder;
    if (s == "e") return Ablation::EncoderOnly;
    throw DataError("unknown ablation '" + s + "' (expected none, wo_ul, e_d, e)");
}

inline std::string to_string(MaskKind k) {
    return k == MaskKind::Causal ? "causal" : "bidirectional";
}
inline MaskKind mask_from_string(const std::string& s) {
    if (s == "causal") return MaskKind::Causal;
    if (s == "bidirectional") return MaskKind::Bidirectional;
    throw DataError("unknown mask kind '" + s + "'");
}

inline nlohmann::json config_to_json(const EDUConfig& c) {
    return {{"layers", c.layers},
            {"d_model", c.d_model},
            {"heads", c.heads},
            {"d_ff", c.d_ff},
            {"dropout", c.dropout},
            {"vocab_size", c.vocab_size},
            {"max_persona", c.max_persona},
            {"max_query", c.max_query},
            {"max_response", c.max_response},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"u_mask", to_string(c.u_mask)},
            {"scheme", to_string(c.scheme)},
            {"ablation", to_string(c.ablation)}};
}

inline EDUConfig config_from_json(const nlohmann::json& j) {
    EDUConfig c;
    c.layers = j.at("layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.dropout = j.at("dropout").get<Real>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_persona = j.at("max_persona").get<std::size_t>();
    c.max_query = j.at("max_query").get<std::size_t>();
    c.max_response = j.at("max_response").get<std::size_t>();
    c.alpha = j.at("alpha").get<Real>();
    c.beta = j.at("beta").get<Real>();
    c.u_mask = mask_from_string(j.at("u_mask").get<std::string>());
    c.scheme = scheme_from_string(j.at("scheme").get<std::string>());
    c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    return c;
}

// ---- save / load ---------------------------------------------------------------

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}
inline std::uint64_t read_u64(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    if (!is) throw CheckpointError("truncated checkpoint header length");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

// FNV-1a over the raw payload bytes; detects any single-byte corruption.
struct Fnv1a {
    std::uint64_t h = 14695981039346656037ull;
    void update(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
};

inline void write_reals(std::ostream& os, const std::vector<Real>& v, Fnv1a& hash) {
    static_assert(sizeof(Real) == 8);
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(Real)));
    hash.update(v.data(), v.size() * sizeof(Real));
}
inline void read_reals(std::istream& is, std::vector<Real>& v, Fnv1a& hash) {
    is.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(Real)));
    if (!is) throw CheckpointError("truncated checkpoint payload");
    hash.update(v.data(), v.size() * sizeof(Real));
}

}  // namespace detail

// Save everything needed to resume: config, vocabulary, parameters, step,
// and (optionally) the Adam moments.
inline void save_checkpoint(const TrainState& state, const Vocabulary& vocab,
                            const std::string& path, bool with_optimizer = false) {
    auto params = gamma_params(state.model);
    auto& opt = const_cast<TrainState&>(state).optimizer;
    if (with_optimizer) {
        for (const auto& p : params) {
            auto& slot = opt.slots()[p.name];
            if (slot.m.size() != p.tensor.size()) {
                slot.m.assign(p.tensor.size(), 0.0);
                slot.v.assign(p.tensor.size(), 0.0);
            }
        }
    }
    // The checksum covers the whole payload and lives in the header, so it
    // is computed in a first pass.
    detail::Fnv1a hash;
    for (const auto& p : params)
        hash.update(p.tensor.data().data(), p.tensor.size() * sizeof(Real));
    if (with_optimizer) {
        for (const auto& p : params) {
            const auto& slot = opt.slots()[p.name];
            hash.update(slot.m.data(), slot.m.size() * sizeof(Real));
        }
        for (const auto& p : params) {
            const auto& slot = opt.slots()[p.name];
            hash.update(slot.v.data(), slot.v.size() * sizeof(Real));
        }
    }

    nlohmann::json header;
    header["version"] = kCheckpointVersion;
    header["dtype"] = "f64";
    header["step"] = state.global_step;
    header["epoch"] = state.epoch;
    header["config"] = config_to_json(state.config);
    header["vocab"] = vocab.tokens();
    header["has_optimizer"] = with_optimizer;
    if (with_optimizer) {
        header["optimizer_steps"] = state.optimizer.steps_taken();
        header["optimizer_lr"] = state.optimizer.hyper().lr;
        header["optimizer_total_steps"] = state.optimizer.hyper().total_steps;
        header["optimizer_weight_decay"] = state.optimizer.hyper().weight_decay;
    }
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& p : params) {
        manifest.push_back(
            {{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
        offset += p.tensor.size() * sizeof(Real);
    }
    header["manifest"] = manifest;
    header["payload_bytes"] = offset * (with_optimizer ? 3 : 1);
    header["checksum"] = hash.h;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + path);
    const std::string header_text = header.dump();
    detail::write_u64(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    detail::Fnv1a sink;  // streaming hash unused on write; payload already hashed
    for (const auto& p : params) detail::write_reals(out, p.tensor.data(), sink);
    if (with_optimizer) {
        for (const auto& p : params) detail::write_reals(out, opt.slots()[p.name].m, sink);
        for (const auto& p : params) detail::write_reals(out, opt.slots()[p.name].v, sink);
    }
    if (!out) throw CheckpointError("short write to " + path);
}

struct LoadedCheckpoint {
    TrainState state;
    Vocabulary vocab;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open " + path);
    const std::uint64_t header_len = detail::read_u64(in);
    std::string header_text(header_len, '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_len));
    if (!in) throw CheckpointError("truncated checkpoint header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const std::exception& e) {
        throw CheckpointError(std::string("bad checkpoint header: ") + e.what());
    }
    const int version = header.at("version").get<int>();
    if (version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + std::to_string(version) +
                              " unsupported (expected " + std::to_string(kCheckpointVersion) +
                              ")");
    if (header.at("dtype").get<std::string>() != "f64")
        throw CheckpointError("unsupported checkpoint dtype");

    LoadedCheckpoint loaded;
    loaded.state.config = config_from_json(header.at("config"));
    for (const auto& t : header.at("vocab")) loaded.vocab.add(t.get<std::string>());
    if (loaded.vocab.size() != loaded.state.config.vocab_size)
        throw CheckpointError("vocabulary size does not match config");

    // Rebuild the parameter tree, then overwrite values in manifest order.
    loaded.state.model = init_model(loaded.state.config, 0);
    auto params = gamma_params(loaded.state.model);
    const auto& manifest = header.at("manifest");
    if (manifest.size() != params.size())
        throw CheckpointError("manifest entry count mismatch: " +
                              std::to_string(manifest.size()) + " vs " +
                              std::to_string(params.size()));
    std::uint64_t expect_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = manifest[i];
        if (entry.at("name").get<std::string>() != params[i].name)
            throw CheckpointError("manifest name mismatch at index " + std::to_string(i));
        const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
        if (shape != params[i].tensor.shape())
            throw CheckpointError("manifest shape mismatch for " + params[i].name);
        if (entry.at("offset").get<std::uint64_t>() != expect_offset)
            throw CheckpointError("manifest offsets not contiguous at " + params[i].name);
        expect_offset += params[i].tensor.size() * sizeof(Real);
    }

    const bool has_optimizer = header.value("has_optimizer", false);
    const std::uint64_t expect_payload = expect_offset * (has_optimizer ? 3 : 1);
    if (header.at("payload_bytes").get<std::uint64_t>() != expect_payload)
        throw CheckpointError("payload length does not match manifest sum");

    detail::Fnv1a hash;
    for (auto& p : params) detail::read_reals(in, p.tensor.data(), hash);
    if (has_optimizer) {
        AdamHyper hyper;
        hyper.lr = header.at("optimizer_lr").get<Real>();
        hyper.total_steps = header.at("optimizer_total_steps").get<std::size_t>();
        hyper.weight_decay = header.at("optimizer_weight_decay").get<Real>();
        loaded.state.optimizer = AdamOptimizer(hyper);
        loaded.state.optimizer.set_steps_taken(
            header.at("optimizer_steps").get<std::size_t>());
        for (const auto& p : params) {
            auto& slot = loaded.state.optimizer.slots()[p.name];
            slot.m.assign(p.tensor.size(), 0.0);
            slot.v.assign(p.tensor.size(), 0.0);
        }
        for (const auto& p : params)
            detail::read_reals(in, loaded.state.optimizer.slots()[p.name].m, hash);
        for (const auto& p : params)
            detail::read_reals(in, loaded.state.optimizer.slots()[p.name].v, hash);
    }
    // Integrity: exact length and content hash.
    char extra;
    if (in.read(&extra, 1))
        throw CheckpointError("checkpoint payload longer than manifest sum");
    if (header.contains("checksum") &&
        header.at("checksum").get<std::uint64_t>() != hash.h)
        throw CheckpointError("checkpoint payload checksum mismatch");

    loaded.state.global_step = header.at("step").get<std::size_t>();
    loaded.state.epoch = header.value("epoch", std::size_t{0});
    return loaded;
}

}  // namespace edu
