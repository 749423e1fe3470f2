#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flowcps/common.hpp"
#include "flowcps/grpo.hpp"
#include "flowcps/rng.hpp"
#include "flowcps/samplers.hpp"
#include "flowcps/schedule.hpp"
#include "flowcps/velocity.hpp"

namespace flowcps {

/// A bad config file or spec string; maps to the usage exit status.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

/// Splits on sep at nesting depth zero, so "a(x,y), b" -> {"a(x,y)", "b"}.
inline std::vector<std::string> split_top_level(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string current;
    int depth = 0;
    for (char ch : s) {
        if (ch == '(') ++depth;
        if (ch == ')') --depth;
        if (ch == sep && depth == 0) {
            parts.push_back(trim(current));
            current.clear();
        } else {
            current.push_back(ch);
        }
    }
    parts.push_back(trim(current));
    if (parts.size() == 1 && parts.front().empty()) parts.clear();
    return parts;
}

inline double parse_double(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(what + ": not a number: '" + s + "'");
    }
}

inline long long parse_int(const std::string& s, const std::string& what) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(what + ": not an integer: '" + s + "'");
    }
}

/// "name(arg1,arg2)" -> {"name", "arg1,arg2"}; a bare "name" has empty args.
inline std::pair<std::string, std::string> parse_call(const std::string& spec, const std::string& what) {
    const std::string s = trim(spec);
    const auto open = s.find('(');
    if (open == std::string::npos) return {s, ""};
    if (s.back() != ')') throw ConfigError(what + ": unbalanced parentheses in '" + spec + "'");
    return {trim(s.substr(0, open)), trim(s.substr(open + 1, s.size() - open - 2))};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Flat INI-style config text: [section] headers, key = value lines, comments
// with '#' or ';'. Serialization is canonical so a resolved config written to
// a manifest re-parses to the same text.
// ---------------------------------------------------------------------------

class Config {
public:
    static Config parse(const std::string& text) {
        Config cfg;
        std::istringstream in(text);
        std::string line;
        std::string section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            // ';' only introduces a whole-line comment: it doubles as the
            // separator inside mixture(...) values
            const std::string probe = detail::trim(line);
            if (!probe.empty() && probe.front() == ';') continue;
            const auto comment = line.find('#');
            if (comment != std::string::npos) line.erase(comment);
            line = detail::trim(line);
            if (line.empty()) continue;
            if (line.front() == '[') {
                if (line.back() != ']') throw ConfigError("config line " + std::to_string(lineno) + ": bad section header");
                section = detail::trim(line.substr(1, line.size() - 2));
                if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
                cfg.ensure_section(section);
                continue;
            }
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
            if (section.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": key outside any [section]");
            cfg.set(section, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        }
        return cfg;
    }

    std::string serialize() const {
        std::string out;
        for (const auto& [name, entries] : sections_) {
            out += "[" + name + "]\n";
            for (const auto& [key, value] : entries) out += key + " = " + value + "\n";
            out += "\n";
        }
        return out;
    }

    void set(const std::string& section, const std::string& key, const std::string& value) {
        auto& entries = ensure_section(section);
        for (auto& [k, v] : entries) {
            if (k == key) {
                v = value;
                return;
            }
        }
        entries.emplace_back(key, value);
    }

    std::optional<std::string> get(const std::string& section, const std::string& key) const {
        for (const auto& [name, entries] : sections_) {
            if (name != section) continue;
            for (const auto& [k, v] : entries)
                if (k == key) return v;
        }
        return std::nullopt;
    }

    std::string require(const std::string& section, const std::string& key) const {
        auto v = get(section, key);
        if (!v) throw ConfigError("missing required config key [" + section + "] " + key);
        return *v;
    }

    double get_double(const std::string& section, const std::string& key, double fallback) const {
        auto v = get(section, key);
        return v ? detail::parse_double(*v, "[" + section + "] " + key) : fallback;
    }

    long long get_int(const std::string& section, const std::string& key, long long fallback) const {
        auto v = get(section, key);
        return v ? detail::parse_int(*v, "[" + section + "] " + key) : fallback;
    }

private:
    using Entries = std::vector<std::pair<std::string, std::string>>;

    Entries& ensure_section(const std::string& name) {
        for (auto& [n, entries] : sections_)
            if (n == name) return entries;
        sections_.emplace_back(name, Entries{});
        return sections_.back().second;
    }

    std::vector<std::pair<std::string, Entries>> sections_;
};

// ---------------------------------------------------------------------------
// Spec mini-grammars shared by config files and tests.
// ---------------------------------------------------------------------------

/// "uniform(K)"
inline TimeGrid parse_grid_spec(const std::string& spec) {
    auto [name, args] = detail::parse_call(spec, "grid spec");
    if (name != "uniform") throw ConfigError("grid spec: unknown grid '" + name + "' (expected uniform(K))");
    const long long K = detail::parse_int(args, "grid spec");
    if (K < 1) throw ConfigError("grid spec: step count must be >= 1");
    return uniform_grid(static_cast<int>(K));
}

/// "flow(eta)" | "dance(eta)" | "cps(eta)" | "patched(eta)"
inline SigmaRule parse_sigma_rule(const std::string& spec) {
    auto [name, args] = detail::parse_call(spec, "sigma rule");
    SigmaKind kind;
    if (name == "flow") kind = SigmaKind::FlowGrpo;
    else if (name == "dance") kind = SigmaKind::DanceGrpo;
    else if (name == "cps") kind = SigmaKind::CpsEta;
    else if (name == "patched") kind = SigmaKind::PatchedEta;
    else throw ConfigError("sigma rule: unknown rule '" + name + "'");
    if (args.empty()) throw ConfigError("sigma rule: missing eta in '" + spec + "'");
    try {
        return SigmaRule(kind, detail::parse_double(args, "sigma rule eta"));
    } catch (const std::exception& e) {
        throw ConfigError(std::string("sigma rule: ") + e.what());
    }
}

/// "ode" | "flow_sde(flow|dance, eta)" | "cps(eta)" | "cpws(<rule>, eta)" |
/// "patched(eta)"
inline SamplerKind parse_sampler_spec(const std::string& spec) {
    auto [name, args] = detail::parse_call(spec, "sampler spec");
    try {
        if (name == "ode") {
            if (!args.empty()) throw ConfigError("sampler spec: ode takes no arguments");
            return SamplerKind::ode();
        }
        if (name == "cps") return SamplerKind::cps(detail::parse_double(args, "sampler spec eta"));
        if (name == "patched") return SamplerKind::patched_sde(detail::parse_double(args, "sampler spec eta"));
        if (name == "flow_sde" || name == "cpws") {
            const auto parts = detail::split_top_level(args, ',');
            if (parts.size() != 2) throw ConfigError("sampler spec: " + name + " expects (rule, eta)");
            const SigmaRule rule = parse_sigma_rule(parts[0] + "(" + parts[1] + ")");
            return name == "flow_sde" ? SamplerKind::flow_sde(rule) : SamplerKind::cpws(rule);
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError("sampler spec '" + spec + "': " + e.what());
    }
    throw ConfigError("sampler spec: unknown sampler '" + name + "'");
}

inline std::vector<SamplerKind> parse_sampler_list(const std::string& spec) {
    std::vector<SamplerKind> kinds;
    for (const auto& part : detail::split_top_level(spec, ',')) kinds.push_back(parse_sampler_spec(part));
    return kinds;
}

/// "neg_distance(x1,...,xD)" | "mode_indicator(x1,...,xD, radius)"
inline RewardSpec parse_reward_spec(const std::string& spec) {
    auto [name, args] = detail::parse_call(spec, "reward spec");
    const auto parts = detail::split_top_level(args, ',');
    if (name == "neg_distance") {
        if (parts.empty()) throw ConfigError("reward spec: neg_distance needs target coordinates");
        Vec target;
        for (const auto& p : parts) target.push_back(detail::parse_double(p, "reward target"));
        return NegDistance{std::move(target)};
    }
    if (name == "mode_indicator") {
        if (parts.size() < 2) throw ConfigError("reward spec: mode_indicator needs coordinates and a radius");
        Vec target;
        for (std::size_t i = 0; i + 1 < parts.size(); ++i) target.push_back(detail::parse_double(parts[i], "reward target"));
        const double radius = detail::parse_double(parts.back(), "reward radius");
        if (!(radius > 0.0)) throw ConfigError("reward spec: radius must be > 0");
        return ModeIndicator{std::move(target), radius};
    }
    throw ConfigError("reward spec: unknown reward '" + name + "'");
}

/// Data distribution for pretraining:
///   delta(x1,...,xD)                point mass
///   gauss(s) | gauss(s, D)          N(0, s^2 I), default D = 2
///   mixture(s; m1x,m1y; m2x,m2y)    equal-weight Gaussian mixture, std s
struct DataSpec {
    enum class Kind { Delta, Gauss, Mixture };
    Kind kind = Kind::Gauss;
    Vec delta_point;
    double gauss_std = 1.0;
    int gauss_dim = 2;
    std::vector<Vec> means;
    double component_std = 0.1;

    int dim() const {
        switch (kind) {
            case Kind::Delta: return static_cast<int>(delta_point.size());
            case Kind::Gauss: return gauss_dim;
            case Kind::Mixture: return static_cast<int>(means.front().size());
        }
        return 0;
    }

    DataSampler sampler() const {
        switch (kind) {
            case Kind::Delta:
                return [point = delta_point](Rng&) { return point; };
            case Kind::Gauss:
                return [s = gauss_std, d = gauss_dim](Rng& rng) {
                    Vec x = rng.normal_vec(static_cast<std::size_t>(d));
                    for (auto& v : x) v *= s;
                    return x;
                };
            case Kind::Mixture:
                return [means = means, s = component_std](Rng& rng) {
                    const std::size_t pick = static_cast<std::size_t>(rng.uniform() * static_cast<double>(means.size()));
                    const Vec& m = means[pick < means.size() ? pick : means.size() - 1];
                    Vec x = rng.normal_vec(m.size());
                    for (std::size_t i = 0; i < x.size(); ++i) x[i] = m[i] + s * x[i];
                    return x;
                };
        }
        throw std::logic_error("DataSpec: unknown kind");
    }
};

inline DataSpec parse_data_spec(const std::string& spec) {
    auto [name, args] = detail::parse_call(spec, "data spec");
    DataSpec data;
    if (name == "delta") {
        data.kind = DataSpec::Kind::Delta;
        for (const auto& p : detail::split_top_level(args, ','))
            data.delta_point.push_back(detail::parse_double(p, "data spec"));
        if (data.delta_point.empty()) throw ConfigError("data spec: delta needs coordinates");
        return data;
    }
    if (name == "gauss") {
        data.kind = DataSpec::Kind::Gauss;
        const auto parts = detail::split_top_level(args, ',');
        if (parts.empty() || parts.size() > 2) throw ConfigError("data spec: gauss expects (s) or (s, dim)");
        data.gauss_std = detail::parse_double(parts[0], "data spec std");
        if (!(data.gauss_std > 0.0)) throw ConfigError("data spec: std must be > 0");
        if (parts.size() == 2) {
            data.gauss_dim = static_cast<int>(detail::parse_int(parts[1], "data spec dim"));
            if (data.gauss_dim < 1) throw ConfigError("data spec: dim must be >= 1");
        }
        return data;
    }
    if (name == "mixture") {
        data.kind = DataSpec::Kind::Mixture;
        const auto groups = detail::split_top_level(args, ';');
        if (groups.size() < 2) throw ConfigError("data spec: mixture expects (s; mean; mean; ...)");
        data.component_std = detail::parse_double(groups[0], "data spec std");
        if (!(data.component_std > 0.0)) throw ConfigError("data spec: std must be > 0");
        std::size_t dim = 0;
        for (std::size_t g = 1; g < groups.size(); ++g) {
            Vec mean;
            for (const auto& p : detail::split_top_level(groups[g], ','))
                mean.push_back(detail::parse_double(p, "data spec mean"));
            if (mean.empty()) throw ConfigError("data spec: empty mixture mean");
            if (dim == 0) dim = mean.size();
            if (mean.size() != dim) throw ConfigError("data spec: mixture means disagree on dimension");
            data.means.push_back(std::move(mean));
        }
        return data;
    }
    throw ConfigError("data spec: unknown distribution '" + name + "'");
}

/// Builds the grpo sampler fields from a sampler spec; only stochastic
/// families are accepted.
inline void apply_sampler_to_grpo(GrpoConfig& cfg, const SamplerKind& kind) {
    if (!kind.stochastic() || kind.family == SamplerFamily::DdimRef)
        throw ConfigError("grpo sampler must be one of flow_sde, cps, cpws, patched");
    cfg.family = kind.family;
    cfg.rule_kind = kind.rule.kind;
    cfg.eta = kind.rule.eta;
}

}  // namespace flowcps
