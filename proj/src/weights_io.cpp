#include "cmab/weights_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace cmab {

namespace {

std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_weights(const std::string& path, const CmanpConfig& cfg,
                  const ParamStore& params) {
    std::ostringstream out;
    out << "{\n  \"format_version\": 1,\n  \"meta\": {\n";
    out << "    \"d\": " << cfg.d << ",\n";
    out << "    \"H\": " << cfg.heads << ",\n";
    out << "    \"K\": " << cfg.K << ",\n";
    out << "    \"L_I\": " << cfg.L_I << ",\n";
    out << "    \"L_B\": " << cfg.L_B << ",\n";
    out << "    \"d_ff\": " << cfg.d_ff << ",\n";
    out << "    \"precision\": \"f64\"\n  },\n";
    out << "  \"tensors\": {\n";
    bool first = true;
    for (const auto& [name, m] : params.items()) {
        if (!first) out << ",\n";
        first = false;
        out << "    \"" << name << "\": {\"shape\": [" << m.rows() << ", "
            << m.cols() << "], \"data\": [";
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (i) out << ", ";
            out << fmt_real(m.data()[i]);
        }
        out << "]}";
    }
    out << "\n  }\n}\n";
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_weights: cannot open " + path);
    f << out.str();
}

LoadedWeights load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_weights: cannot open " + path);
    nlohmann::json doc;
    try {
        f >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("load_weights: parse error in " + path +
                                 ": " + e.what());
    }
    if (doc.value("format_version", 0) != 1)
        throw std::runtime_error("load_weights: unsupported format_version");
    const auto& meta = doc.at("meta");
    LoadedWeights lw;
    lw.cfg.d = meta.at("d").get<int>();
    lw.cfg.heads = meta.at("H").get<int>();
    lw.cfg.K = meta.at("K").get<int>();
    lw.cfg.L_I = meta.at("L_I").get<int>();
    lw.cfg.L_B = meta.at("L_B").get<int>();
    lw.cfg.d_ff = meta.at("d_ff").get<int>();
    if (meta.at("precision").get<std::string>() != "f64")
        throw std::runtime_error("load_weights: only f64 weights supported");

    // Rebuild the canonical inventory, then fill every tensor from the
    // document; shape mismatches and missing tensors are errors.
    RngState rng(0);
    lw.params = init_cmanp_params(rng, lw.cfg);
    const auto& tensors = doc.at("tensors");
    for (auto& [name, m] : lw.params.items()) {
        if (!tensors.contains(name))
            throw std::runtime_error("load_weights: missing tensor '" + name +
                                     "'");
        const auto& t = tensors.at(name);
        const auto& shape = t.at("shape");
        if (shape.size() != 2 || shape[0].get<int>() != m.rows() ||
            shape[1].get<int>() != m.cols())
            throw std::runtime_error("load_weights: shape mismatch for '" +
                                     name + "'");
        const auto& data = t.at("data");
        if (data.size() != m.size())
            throw std::runtime_error("load_weights: data length mismatch for '" +
                                     name + "'");
        for (std::size_t i = 0; i < m.size(); ++i)
            m.data()[i] = data[i].get<double>();
    }
    return lw;
}

}  // namespace cmab
