#pragma once

// JSON checkpoints: {"spec", "params", "running_stats", "rng_seed"}.
// Doubles are written in shortest round-trip form, so save/load is exact.

#include <cstdint>
#include <fstream>
#include <string>

#include "json.hpp"

#include "alr/error.hpp"
#include "alr/nn.hpp"

namespace alr {

using json = nlohmann::json;

namespace detail {

inline json to_json(const Tensor& t)
{
    json rows = json::array();
    for (std::size_t r = 0; r < t.rows(); ++r) rows.push_back(t.row_values(r));
    return rows;
}

inline Tensor tensor_from_json(const json& j, const std::string& what)
{
    if (!j.is_array() || j.empty()) throw Error(ErrorKind::io, what + ": expected a nested array");
    std::vector<double> data;
    const std::size_t cols = j.front().size();
    for (const auto& row : j) {
        if (!row.is_array() || row.size() != cols || cols == 0) {
            throw Error(ErrorKind::io, what + ": ragged or empty rows");
        }
        for (const auto& v : row) {
            if (!v.is_number()) throw Error(ErrorKind::io, what + ": non-numeric entry");
            data.push_back(v.get<double>());
        }
    }
    return Tensor({j.size(), cols}, std::move(data));
}

} // namespace detail

inline json spec_to_json(const MlpSpec& spec)
{
    return json{{"input_dim", spec.input_dim},
                {"hidden", spec.hidden},
                {"output_dim", spec.output_dim},
                {"activation", "relu"},
                {"batchnorm", spec.batchnorm},
                {"spectral_norm", spec.spectral_norm}};
}

inline MlpSpec spec_from_json(const json& j)
{
    try {
        MlpSpec spec;
        spec.input_dim = j.at("input_dim").get<std::size_t>();
        spec.hidden = j.at("hidden").get<std::vector<std::size_t>>();
        spec.output_dim = j.at("output_dim").get<std::size_t>();
        if (j.value("activation", std::string("relu")) != "relu") {
            throw Error(ErrorKind::io, "unsupported activation " + j.at("activation").dump());
        }
        spec.batchnorm = j.value("batchnorm", std::vector<bool>{});
        spec.spectral_norm = j.value("spectral_norm", false);
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, std::string("bad network spec: ") + e.what());
    }
}

inline json checkpoint_to_json(const Mlp& net, std::uint64_t rng_seed)
{
    json params = json::array();
    json stats = json::array();
    for (const auto& l : net.params.layers) {
        json p{{"weight", detail::to_json(l.weight)}, {"bias", detail::to_json(l.bias)}};
        if (l.bn) {
            p["bn_scale"] = detail::to_json(l.bn->scale);
            p["bn_shift"] = detail::to_json(l.bn->shift);
            stats.push_back(json{{"mean", detail::to_json(l.bn->running_mean)},
                                 {"var", detail::to_json(l.bn->running_var)}});
        } else {
            stats.push_back(nullptr);
        }
        if (l.sn) {
            p["sn_left"] = detail::to_json(l.sn->left);
            p["sn_right"] = detail::to_json(l.sn->right);
        }
        params.push_back(std::move(p));
    }
    return json{{"spec", spec_to_json(net.spec)},
                {"params", std::move(params)},
                {"running_stats", std::move(stats)},
                {"rng_seed", rng_seed}};
}

struct Checkpoint {
    Mlp net;
    std::uint64_t rng_seed = 0;
};

inline Checkpoint checkpoint_from_json(const json& j)
{
    try {
        Checkpoint ck;
        ck.net.spec = spec_from_json(j.at("spec"));
        ck.rng_seed = j.value("rng_seed", std::uint64_t{0});
        const json& params = j.at("params");
        const json& stats = j.at("running_stats");
        if (params.size() != ck.net.spec.num_layers() || stats.size() != params.size()) {
            throw Error(ErrorKind::io, "checkpoint layer count does not match its spec");
        }
        std::size_t in = ck.net.spec.input_dim;
        for (std::size_t i = 0; i < params.size(); ++i) {
            const json& p = params[i];
            LayerParams l;
            const std::string at = "layer " + std::to_string(i);
            l.weight = detail::tensor_from_json(p.at("weight"), at + " weight");
            l.bias = detail::tensor_from_json(p.at("bias"), at + " bias");
            const std::size_t out = i < ck.net.spec.hidden.size() ? ck.net.spec.hidden[i] : ck.net.spec.output_dim;
            if (l.weight.rows() != in || l.weight.cols() != out || l.bias.rows() != 1 || l.bias.cols() != out) {
                throw Error(ErrorKind::io, at + ": parameter shapes do not match the spec");
            }
            if (p.contains("bn_scale")) {
                if (stats[i].is_null()) throw Error(ErrorKind::io, at + ": batchnorm without running stats");
                l.bn = BatchNormParams{detail::tensor_from_json(p.at("bn_scale"), at + " bn_scale"),
                                       detail::tensor_from_json(p.at("bn_shift"), at + " bn_shift"),
                                       detail::tensor_from_json(stats[i].at("mean"), at + " running mean"),
                                       detail::tensor_from_json(stats[i].at("var"), at + " running var")};
            }
            if (p.contains("sn_left")) {
                l.sn = SpectralState{detail::tensor_from_json(p.at("sn_left"), at + " sn_left"),
                                     detail::tensor_from_json(p.at("sn_right"), at + " sn_right")};
            }
            if (i < ck.net.spec.hidden.size() && ck.net.spec.has_batchnorm(i) && !l.bn) {
                throw Error(ErrorKind::io, at + ": spec requires batchnorm params");
            }
            ck.net.params.layers.push_back(std::move(l));
            in = out;
        }
        return ck;
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, std::string("bad checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::string& path, const Mlp& net, std::uint64_t rng_seed)
{
    std::ofstream os(path);
    if (!os) throw Error(ErrorKind::io, "cannot write " + path);
    os << checkpoint_to_json(net, rng_seed).dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::string& path)
{
    std::ifstream is(path);
    if (!is) throw Error(ErrorKind::io, "cannot read " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::io, path + ": " + e.what());
    }
    return checkpoint_from_json(j);
}

} // namespace alr
