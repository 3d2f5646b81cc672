#pragma once

// Checkpoint container:
//
//   bytes 0..7    magic "AALCKPT\0"
//   bytes 8..11   format version, uint32 little-endian
//   bytes 12..19  header length in bytes, uint64 little-endian
//   header        JSON object (learner, backbone config, learner config,
//                 free-form run metadata, tensor table)
//   payload       float64 little-endian values of every tensor, in table order
//
// Tensor table entries carry name, shape, offset and count (in values, relative
// to the start of the payload).

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "aal/backbone.hpp"
#include "aal/error.hpp"
#include "aal/maml.hpp"

namespace aal {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char checkpoint_magic[8] = {'A', 'A', 'L', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

/// A trained learner: prototypical-network embedding or MAML meta-parameters.
using Model = std::variant<ConvBackboneParams, MetaParams>;

inline std::string learner_name(const Model& m) { return std::holds_alternative<MetaParams>(m) ? "maml" : "protonet"; }

inline const BackboneConfig& backbone_config(const Model& m) {
    return std::visit([](const auto& p) -> const BackboneConfig& { return p.config; }, m);
}

inline nlohmann::json to_json(const BackboneConfig& c) {
    return {{"input_channels", c.input_channels}, {"image_side", c.image_side}, {"filters", c.filters},
            {"blocks", c.blocks},                 {"head", to_string(c.head)},  {"n_out", c.n_out}};
}

inline BackboneConfig backbone_from_json(const nlohmann::json& j) {
    BackboneConfig c;
    c.input_channels = j.at("input_channels").get<int>();
    c.image_side = j.at("image_side").get<int>();
    c.filters = j.at("filters").get<int>();
    c.blocks = j.at("blocks").get<int>();
    c.head = j.at("head").get<std::string>() == "linear" ? HeadKind::linear : HeadKind::embedding;
    c.n_out = j.at("n_out").get<int>();
    c.validate();
    return c;
}

namespace detail {

struct TensorWriter {
    nlohmann::json table = nlohmann::json::array();
    std::vector<double> payload;

    void add(const std::string& name, std::vector<int> shape, std::span<const double> values) {
        table.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size()}, {"count", values.size()}});
        payload.insert(payload.end(), values.begin(), values.end());
    }

    void add_flat(const std::string& name, std::span<const double> values) {
        add(name, {static_cast<int>(values.size())}, values);
    }
};

struct TensorReader {
    const nlohmann::json& table;
    const std::vector<double>& payload;

    std::vector<double> get(const std::string& name, std::size_t expected) const {
        for (const auto& t : table) {
            if (t.at("name").get<std::string>() == name) {
                const auto off = t.at("offset").get<std::size_t>();
                const auto count = t.at("count").get<std::size_t>();
                if (count != expected || off + count > payload.size()) {
                    throw IntegrityError("checkpoint tensor '" + name + "' has " + std::to_string(count) +
                                         " values, expected " + std::to_string(expected));
                }
                return {payload.begin() + static_cast<std::ptrdiff_t>(off),
                        payload.begin() + static_cast<std::ptrdiff_t>(off + count)};
            }
        }
        throw IntegrityError("checkpoint is missing tensor '" + name + "'");
    }
};

inline void write_slots(TensorWriter& w, const std::string& prefix, const std::vector<TensorSlot>& slots,
                        const std::vector<double>& values) {
    for (const auto& s : slots) {
        w.add(prefix + s.name, s.shape, std::span<const double>(values).subspan(s.offset, s.size));
    }
}

inline std::vector<double> read_slots(const TensorReader& r, const std::string& prefix,
                                      const std::vector<TensorSlot>& slots, std::size_t total) {
    std::vector<double> out(total);
    for (const auto& s : slots) {
        const auto v = r.get(prefix + s.name, s.size);
        std::copy(v.begin(), v.end(), out.begin() + static_cast<std::ptrdiff_t>(s.offset));
    }
    return out;
}

inline void write_stats(TensorWriter& w, const std::string& prefix, const RunningStats& s) {
    w.add_flat(prefix + "running_mean", s.mean);
    w.add_flat(prefix + "running_var", s.var);
}

inline RunningStats read_stats(const TensorReader& r, const std::string& prefix, std::size_t n) {
    return {r.get(prefix + "running_mean", n), r.get(prefix + "running_var", n)};
}

}  // namespace detail

/// Writes `model` with run metadata `meta` (any JSON object). The file is
/// written to a temporary sibling and renamed into place.
inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const nlohmann::json& meta = nlohmann::json::object()) {
    nlohmann::json header;
    header["learner"] = learner_name(model);
    header["backbone"] = to_json(backbone_config(model));
    header["meta"] = meta;
    detail::TensorWriter w;
    const auto layout = make_layout(backbone_config(model));
    if (const auto* p = std::get_if<ConvBackboneParams>(&model)) {
        detail::write_slots(w, "", layout.weights, p->weights);
        detail::write_slots(w, "", layout.norm, p->norm);
        detail::write_stats(w, "bn.", p->stats);
    } else {
        const auto& mp = std::get<MetaParams>(model);
        header["maml"] = {{"inner_steps", mp.inner_steps},
                          {"norm_sets", mp.norm.size()},
                          {"stats_sets", mp.stats.size()},
                          {"adam_step", mp.adam.step}};
        detail::write_slots(w, "", layout.weights, mp.theta);
        for (std::size_t k = 0; k < mp.norm.size(); ++k) {
            detail::write_slots(w, "step" + std::to_string(k) + ".", layout.norm, mp.norm[k]);
        }
        for (std::size_t k = 0; k < mp.stats.size(); ++k) {
            detail::write_stats(w, "step" + std::to_string(k) + ".bn.", mp.stats[k]);
        }
        w.add("inner_lr", {mp.layers(), mp.inner_steps}, mp.alpha);
        w.add_flat("adam.m", mp.adam.m);
        w.add_flat("adam.v", mp.adam.v);
    }
    header["tensors"] = w.table;
    const std::string text = header.dump();

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw Error("cannot open checkpoint for writing: " + tmp.string());
        }
        const std::uint32_t version = checkpoint_version;
        const std::uint64_t len = text.size();
        out.write(checkpoint_magic, sizeof(checkpoint_magic));
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        out.write(reinterpret_cast<const char*>(&len), sizeof(len));
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.write(reinterpret_cast<const char*>(w.payload.data()),
                  static_cast<std::streamsize>(w.payload.size() * sizeof(double)));
        out.flush();
        if (!out) {
            throw Error("failed writing checkpoint: " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

struct LoadedCheckpoint {
    Model model;
    nlohmann::json meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw LoadError("cannot open checkpoint: " + path.string());
    }
    char magic[8];
    std::uint32_t version = 0;
    std::uint64_t len = 0;
    in.read(magic, sizeof(magic));
    in.read(reinterpret_cast<char*>(&version), sizeof(version));
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || std::memcmp(magic, checkpoint_magic, sizeof(magic)) != 0) {
        throw IntegrityError("not a checkpoint file: " + path.string());
    }
    if (version != checkpoint_version) {
        throw IntegrityError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw IntegrityError("truncated checkpoint header: " + path.string());
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed checkpoint header in " + path.string() + ": " + e.what());
    }
    std::size_t values = 0;
    for (const auto& t : header.at("tensors")) {
        values = std::max(values, t.at("offset").get<std::size_t>() + t.at("count").get<std::size_t>());
    }
    std::vector<double> payload(values);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(values * sizeof(double)));
    if (!in) {
        throw IntegrityError("truncated checkpoint payload: " + path.string());
    }

    const detail::TensorReader r{header.at("tensors"), payload};
    const auto cfg = backbone_from_json(header.at("backbone"));
    const auto layout = make_layout(cfg);
    const auto n_stats = static_cast<std::size_t>(cfg.blocks) * cfg.filters;
    LoadedCheckpoint out;
    out.meta = header.value("meta", nlohmann::json::object());
    const auto learner = header.at("learner").get<std::string>();
    if (learner == "protonet") {
        out.model = ConvBackboneParams{cfg, detail::read_slots(r, "", layout.weights, layout.weight_count),
                                       detail::read_slots(r, "", layout.norm, layout.norm_count),
                                       detail::read_stats(r, "bn.", n_stats)};
    } else if (learner == "maml") {
        const auto& mj = header.at("maml");
        MetaParams mp;
        mp.config = cfg;
        mp.inner_steps = mj.at("inner_steps").get<int>();
        mp.theta = detail::read_slots(r, "", layout.weights, layout.weight_count);
        for (std::size_t k = 0; k < mj.at("norm_sets").get<std::size_t>(); ++k) {
            mp.norm.push_back(detail::read_slots(r, "step" + std::to_string(k) + ".", layout.norm, layout.norm_count));
        }
        for (std::size_t k = 0; k < mj.at("stats_sets").get<std::size_t>(); ++k) {
            mp.stats.push_back(detail::read_stats(r, "step" + std::to_string(k) + ".bn.", n_stats));
        }
        mp.alpha = r.get("inner_lr", layout.weights.size() * static_cast<std::size_t>(mp.inner_steps));
        mp.adam.step = mj.at("adam_step").get<long long>();
        for (const auto& t : header.at("tensors")) {
            if (t.at("name") == "adam.m") {
                mp.adam.m = r.get("adam.m", t.at("count").get<std::size_t>());
                mp.adam.v = r.get("adam.v", t.at("count").get<std::size_t>());
            }
        }
        out.model = std::move(mp);
    } else {
        throw IntegrityError("unknown learner '" + learner + "' in checkpoint " + path.string());
    }
    return out;
}

}  // namespace aal
