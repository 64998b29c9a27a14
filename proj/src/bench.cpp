#include "cmab/bench.hpp"

#include <sstream>
#include <stdexcept>

namespace cmab {

const std::vector<BenchConfig>& known_configs() {
    static const std::vector<BenchConfig> configs = {
        {"deployment", CmanpConfig::deployment()},
        {"desk", CmanpConfig::desk()},
        {"tiny", {2, 16, 4, 4, 2, 32, 16}},
    };
    return configs;
}

const BenchConfig& find_config(const std::string& name) {
    for (const BenchConfig& c : known_configs())
        if (c.name == name) return c;
    std::string known;
    for (const BenchConfig& c : known_configs())
        known += (known.empty() ? "" : ", ") + c.name;
    throw std::invalid_argument("unknown config '" + name +
                                "' (known configs: " + known + ")");
}

std::string bench_csv_header() {
    return "mode,n,u,peak_bytes,flops,wall_ns,config,seed";
}

std::string bench_csv_row(const BenchRecord& r) {
    std::ostringstream out;
    out << r.mode << ',' << r.n << ',' << r.u << ',' << r.peak_bytes << ','
        << r.flops << ',' << r.wall_ns << ',' << r.config << ',' << r.seed;
    return out.str();
}

}  // namespace cmab
