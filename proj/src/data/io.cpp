#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "tsae/data/dataset.hpp"
#include "tsae/io/binary.hpp"

namespace tsae::data {

namespace {

constexpr char kCacheMagic[] = "TSAE";
constexpr std::uint8_t kCacheVersion = 1;
constexpr std::uint8_t kCacheKindDataset = 'D';

std::string trim(std::string_view s) {
    std::size_t a = 0, b = s.size();
    while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
    while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
    std::string out(s.substr(a, b - a));
    if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
    return out;
}

std::vector<std::string> split_row(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') quoted = !quoted;
        if (ch == ',' && !quoted) {
            cells.push_back(trim(cur));
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    cells.push_back(trim(cur));
    return cells;
}

double parse_number(const std::string& cell, std::size_t line, const std::string& column) {
    double v = 0;
    const char* first = cell.data();
    const char* last = cell.data() + cell.size();
    if (!cell.empty() && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (cell.empty() || ec != std::errc() || ptr != last) {
        throw std::runtime_error("line " + std::to_string(line) + ", column '" + column + "': non-numeric value '" +
                                 cell + "'");
    }
    return v;
}

nlohmann::json pattern_json(const Pattern& p) {
    return {{"kind", pattern_kind_name(p.kind)}, {"channel", p.channel},   {"direction", p.direction},
            {"period", p.period},                {"phase", p.phase},       {"amplitude", p.amplitude},
            {"start", p.start},                  {"length", p.length},     {"wavelength", p.wavelength},
            {"level", p.level},                  {"sigma", p.sigma}};
}

PatternKind kind_from_name(const std::string& s) {
    if (s == "spike") return PatternKind::Spike;
    if (s == "trend") return PatternKind::Trend;
    if (s == "low_variance") return PatternKind::LowVariance;
    throw std::runtime_error("unknown pattern kind '" + s + "'");
}

}  // namespace

std::string factors_to_json(const GenerativeFactors& f) {
    nlohmann::json j;
    j["generator"] = f.generator;
    j["channels"] = f.channels;
    j["length"] = f.length;
    j["noise_seed"] = f.noise_seed;
    j["noise_sigma"] = f.noise_sigma;
    j["patterns"] = nlohmann::json::array();
    for (const auto& p : f.patterns) j["patterns"].push_back(pattern_json(p));
    return j.dump();
}

GenerativeFactors factors_from_json(const std::string& s) {
    const auto j = nlohmann::json::parse(s);
    GenerativeFactors f;
    f.generator = j.at("generator").get<std::string>();
    f.channels = j.at("channels").get<std::size_t>();
    f.length = j.at("length").get<std::size_t>();
    f.noise_seed = j.at("noise_seed").get<std::uint64_t>();
    f.noise_sigma = j.at("noise_sigma").get<double>();
    for (const auto& pj : j.at("patterns")) {
        Pattern p;
        p.kind = kind_from_name(pj.at("kind").get<std::string>());
        p.channel = pj.at("channel").get<std::size_t>();
        p.direction = pj.at("direction").get<int>();
        p.period = pj.at("period").get<std::size_t>();
        p.phase = pj.at("phase").get<std::size_t>();
        p.amplitude = pj.at("amplitude").get<double>();
        p.start = pj.at("start").get<std::size_t>();
        p.length = pj.at("length").get<std::size_t>();
        p.wavelength = pj.at("wavelength").get<double>();
        p.level = pj.at("level").get<double>();
        p.sigma = pj.at("sigma").get<double>();
        f.patterns.push_back(p);
    }
    return f;
}

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    Dataset d;
    d.name = path;
    std::string line;
    std::size_t lineno = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++lineno;
        if (!trim(line).empty()) {
            header = split_row(line);
            break;
        }
    }
    if (header.empty()) return d;
    if (schema.window == 0) throw std::invalid_argument("csv window length must be positive");
    if (schema.stride == 0) throw std::invalid_argument("csv stride must be positive");

    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    auto find_col = [&](const std::string& name) {
        auto it = col.find(name);
        if (it == col.end()) throw std::runtime_error("column '" + name + "' not found in header of '" + path + "'");
        return it->second;
    };
    std::vector<std::size_t> feats;
    if (schema.feature_columns.empty()) {
        for (std::size_t i = 0; i < header.size(); ++i) {
            const auto& h = header[i];
            const bool used = h == schema.label_column || h == schema.timestamp_column ||
                              std::find(schema.mask_columns.begin(), schema.mask_columns.end(), h) !=
                                  schema.mask_columns.end();
            if (!used) feats.push_back(i);
        }
    } else {
        for (const auto& f : schema.feature_columns) feats.push_back(find_col(f));
    }
    if (feats.empty()) throw std::runtime_error("no feature columns in '" + path + "'");
    std::vector<std::size_t> masks;
    for (const auto& m : schema.mask_columns) masks.push_back(find_col(m));
    if (!masks.empty() && masks.size() != feats.size()) {
        throw std::runtime_error("mask columns must match feature columns one to one");
    }
    const bool has_label = !schema.label_column.empty();
    const std::size_t label_col = has_label ? find_col(schema.label_column) : 0;

    std::vector<std::vector<double>> rows;  // per row: features, then masks
    std::vector<double> labels;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const auto cells = split_row(line);
        if (cells.size() != header.size()) {
            throw std::runtime_error("line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                                     " fields, got " + std::to_string(cells.size()));
        }
        std::vector<double> r;
        r.reserve(feats.size() + masks.size());
        for (auto c : feats) r.push_back(parse_number(cells[c], lineno, header[c]));
        for (auto c : masks) {
            const double m = parse_number(cells[c], lineno, header[c]);
            if (m != 0 && m != 1) throw std::runtime_error("line " + std::to_string(lineno) + ": mask values must be 0 or 1");
            r.push_back(m);
        }
        double y = 0;
        if (has_label) {
            y = parse_number(cells[label_col], lineno, header[label_col]);
            if (!schema.regression && (y < 0 || y != std::floor(y))) {
                throw std::runtime_error("line " + std::to_string(lineno) + ": class label must be a nonnegative integer");
            }
        }
        rows.push_back(std::move(r));
        labels.push_back(y);
    }
    if (schema.window > rows.size()) {
        throw std::runtime_error("window " + std::to_string(schema.window) + " is longer than the " +
                                 std::to_string(rows.size()) + " data rows of '" + path + "'");
    }
    const std::size_t D = feats.size(), T = schema.window;
    d.channels = D;
    d.length = T;
    double max_label = 0;
    for (std::size_t s = 0; s + T <= rows.size(); s += schema.stride) {
        LabeledSeries item;
        item.x = Tensor({D, T});
        item.gt_mask = Tensor({D, T}, 0.0);
        item.has_mask = !masks.empty();
        for (std::size_t t = 0; t < T; ++t) {
            for (std::size_t c = 0; c < D; ++c) {
                item.x[c * T + t] = rows[s + t][c];
                if (item.has_mask) item.gt_mask[c * T + t] = rows[s + t][D + c];
            }
        }
        item.y = labels[s + T - 1];
        max_label = std::max(max_label, item.y);
        d.items.push_back(std::move(item));
    }
    d.n_classes = schema.regression ? 0 : static_cast<std::size_t>(max_label) + 1;
    return d;
}

void write_cache(const std::string& path, const Dataset& d) {
    std::ostringstream os;
    io::write_magic(os, kCacheMagic);
    io::write_u8(os, kCacheVersion);
    io::write_u8(os, kCacheKindDataset);
    io::write_string(os, d.name);
    io::write_u32(os, static_cast<std::uint32_t>(d.size()));
    io::write_u32(os, static_cast<std::uint32_t>(d.channels));
    io::write_u32(os, static_cast<std::uint32_t>(d.length));
    io::write_u32(os, static_cast<std::uint32_t>(d.n_classes));
    for (const auto& it : d.items) {
        io::write_f64(os, it.y);
        io::write_f64s(os, it.x.values());
        io::write_u8(os, it.has_mask ? 1 : 0);
        std::string bytes(it.gt_mask.size(), '\0');
        for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = it.gt_mask[i] != 0 ? 1 : 0;
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        io::write_string(os, it.factors ? factors_to_json(*it.factors) : std::string());
    }
    io::write_file_atomic(path, os.str());
}

Dataset read_cache(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset cache '" + path + "'");
    io::expect_magic(is, kCacheMagic, "dataset cache '" + path + "'");
    const auto version = io::read_u8(is);
    if (version != kCacheVersion) throw std::runtime_error("dataset cache version " + std::to_string(version) + " unsupported");
    if (io::read_u8(is) != kCacheKindDataset) throw std::runtime_error("'" + path + "' is not a dataset cache");
    Dataset d;
    d.name = io::read_string(is, 4096);
    const std::uint32_t n = io::read_u32(is);
    d.channels = io::read_u32(is);
    d.length = io::read_u32(is);
    d.n_classes = io::read_u32(is);
    d.items.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        LabeledSeries it;
        it.y = io::read_f64(is);
        it.x = Tensor({d.channels, d.length});
        io::read_f64s(is, it.x.values());
        it.has_mask = io::read_u8(is) != 0;
        std::string bytes(d.channels * d.length, '\0');
        if (!is.read(bytes.data(), static_cast<std::streamsize>(bytes.size()))) throw std::runtime_error("truncated cache");
        it.gt_mask = Tensor({d.channels, d.length});
        for (std::size_t k = 0; k < bytes.size(); ++k) it.gt_mask[k] = bytes[k] ? 1.0 : 0.0;
        const std::string fj = io::read_string(is);
        if (!fj.empty()) it.factors = factors_from_json(fj);
        d.items.push_back(std::move(it));
    }
    return d;
}

}  // namespace tsae::data
