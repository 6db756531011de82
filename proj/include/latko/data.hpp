#pragma once

// Mixed-type predictor data, item banks and item responses: types,
// validation, CSV/JSON ingestion and missingness summaries.

#include "latko/core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace latko {

enum class VarKind { continuous, binary, ordinal };

inline std::string to_string(VarKind k) {
    switch (k) {
    case VarKind::continuous: return "continuous";
    case VarKind::binary: return "binary";
    case VarKind::ordinal: return "ordinal";
    }
    return "?";
}

inline VarKind parse_var_kind(const std::string &s) {
    if (s == "continuous") return VarKind::continuous;
    if (s == "binary") return VarKind::binary;
    if (s == "ordinal") return VarKind::ordinal;
    throw InputError("unknown variable kind '" + s + "'");
}

struct VariableMeta {
    std::string name;
    VarKind kind = VarKind::continuous;
    int n_categories = 0; // K_j + 1; unused for continuous variables

    bool discrete() const noexcept { return kind != VarKind::continuous; }
    /// Number of thresholds K_j (0 for continuous).
    int n_thresholds() const noexcept { return discrete() ? n_categories - 1 : 0; }
    /// Length of the regression block g_j(Z_j).
    int block_size() const noexcept { return kind == VarKind::ordinal ? n_categories - 1 : 1; }
};

inline void validate_meta(const std::vector<VariableMeta> &meta) {
    std::unordered_set<std::string> seen;
    for (const auto &m : meta) {
        if (!seen.insert(m.name).second) throw InputError("duplicate variable name '" + m.name + "'");
        if (m.kind == VarKind::binary && m.n_categories != 2)
            throw InputError("binary variable '" + m.name + "' must have n_categories = 2");
        if (m.kind == VarKind::ordinal && m.n_categories < 3)
            throw InputError("ordinal variable '" + m.name + "' must have n_categories >= 3");
    }
}

/// N x p predictor matrix. Discrete cells hold integer codes 0..K_j stored
/// as doubles; unobserved cells hold NaN.
struct MixedDataset {
    RowMatrix values;
    MaskMatrix observed;
    std::vector<VariableMeta> meta;

    Eigen::Index rows() const noexcept { return values.rows(); }
    Eigen::Index cols() const noexcept { return values.cols(); }
    int code(Eigen::Index i, Eigen::Index j) const { return static_cast<int>(values(i, j)); }

    void validate() const {
        validate_meta(meta);
        if (values.rows() != observed.rows() || values.cols() != observed.cols())
            throw InputError("values and observed mask differ in shape");
        if (static_cast<std::size_t>(values.cols()) != meta.size())
            throw InputError("metadata does not match the number of columns");
        for (Eigen::Index i = 0; i < rows(); ++i) {
            if (!observed.row(i).any())
                throw InputError("row " + std::to_string(i + 1) + " has no observed entries");
            for (Eigen::Index j = 0; j < cols(); ++j) {
                if (!observed(i, j)) continue;
                const double v = values(i, j);
                if (!std::isfinite(v))
                    throw InputError("non-finite value in column '" + meta[j].name + "', row " +
                                     std::to_string(i + 1));
                if (meta[j].discrete()) {
                    if (v != std::floor(v) || v < 0 || v > meta[j].n_thresholds())
                        throw InputError("category code " + std::to_string(v) +
                                         " out of range in column '" + meta[j].name +
                                         "', row " + std::to_string(i + 1));
                }
            }
        }
    }
};

enum class ItemModel { twopl, gpcm };

struct Item {
    std::string id;
    ItemModel model = ItemModel::twopl;
    double a = 1.0;
    std::vector<double> b; // length 1 for 2PL, K for GPCM

    int n_categories() const noexcept { return static_cast<int>(b.size()) + 1; }
};

struct ItemBank {
    std::vector<Item> items;

    std::size_t size() const noexcept { return items.size(); }

    void validate() const {
        std::unordered_set<std::string> ids;
        for (const auto &it : items) {
            if (!ids.insert(it.id).second) throw InputError("duplicate item id '" + it.id + "'");
            if (!std::isfinite(it.a)) throw InputError("item '" + it.id + "': non-finite a");
            if (it.b.empty()) throw InputError("item '" + it.id + "': empty b");
            for (double v : it.b)
                if (!std::isfinite(v)) throw InputError("item '" + it.id + "': non-finite b");
            if (it.model == ItemModel::twopl && it.b.size() != 1)
                throw InputError("2PL item '" + it.id + "' must have exactly one b");
        }
    }
};

struct ResponseData {
    IntMatrix codes;
    MaskMatrix administered;

    Eigen::Index rows() const noexcept { return codes.rows(); }

    void validate(const ItemBank &bank) const {
        if (codes.rows() != administered.rows() || codes.cols() != administered.cols())
            throw InputError("response codes and administered mask differ in shape");
        if (static_cast<std::size_t>(codes.cols()) != bank.size())
            throw InputError("response columns do not match the item bank");
        for (Eigen::Index i = 0; i < codes.rows(); ++i)
            for (Eigen::Index l = 0; l < codes.cols(); ++l)
                if (administered(i, l) &&
                    (codes(i, l) < 0 || codes(i, l) >= bank.items[l].n_categories()))
                    throw InputError("response code out of range for item '" + bank.items[l].id +
                                     "', row " + std::to_string(i + 1));
    }
};

// ---------------------------------------------------------------------------
// CSV helpers

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string &line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t k = 0; k < line.size(); ++k) {
        const char ch = line[k];
        if (quoted) {
            if (ch == '"') {
                if (k + 1 < line.size() && line[k + 1] == '"') {
                    cur.push_back('"');
                    ++k;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::string trim(std::string s) {
    auto ns = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), ns));
    s.erase(std::find_if(s.rbegin(), s.rend(), ns).base(), s.end());
    return s;
}

inline bool is_missing_token(const std::string &s) {
    if (s.empty()) return true;
    return s.size() == 2 && std::toupper(static_cast<unsigned char>(s[0])) == 'N' &&
           std::toupper(static_cast<unsigned char>(s[1])) == 'A';
}

inline double parse_double(const std::string &s, const std::string &where) {
    double v = 0.0;
    const auto *first = s.data();
    const auto *last = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec != std::errc() || ptr != last)
        throw InputError("cannot parse '" + s + "' as a number (" + where + ")");
    return v;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    CsvTable t;
    std::string line;
    bool have_header = false;
    while (std::getline(in, line)) {
        if (!have_header) {
            if (trim(line).empty()) continue;
            if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
            for (auto &h : split_csv_line(line)) t.header.push_back(trim(h));
            have_header = true;
            continue;
        }
        if (trim(line).empty()) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != t.header.size())
            throw InputError("'" + path + "' row " + std::to_string(t.rows.size() + 1) +
                             ": expected " + std::to_string(t.header.size()) + " fields, got " +
                             std::to_string(fields.size()));
        for (auto &f : fields) f = trim(f);
        t.rows.push_back(std::move(fields));
    }
    if (!have_header || t.rows.empty()) throw InputError("'" + path + "': no rows");
    return t;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline nlohmann::json read_json(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception &e) {
        throw InputError("'" + path + "': " + e.what());
    }
}

} // namespace detail

// ---------------------------------------------------------------------------
// Metadata and item bank JSON

inline nlohmann::json meta_to_json(const std::vector<VariableMeta> &meta) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &m : meta) {
        nlohmann::json o{{"name", m.name}, {"kind", to_string(m.kind)}};
        if (m.discrete()) o["n_categories"] = m.n_categories;
        arr.push_back(std::move(o));
    }
    return arr;
}

inline std::vector<VariableMeta> meta_from_json(const nlohmann::json &j) {
    if (!j.is_array()) throw InputError("metadata must be a JSON array");
    std::vector<VariableMeta> meta;
    try {
        for (const auto &o : j) {
            VariableMeta m;
            m.name = o.at("name").get<std::string>();
            m.kind = parse_var_kind(o.at("kind").get<std::string>());
            if (m.discrete()) m.n_categories = o.at("n_categories").get<int>();
            meta.push_back(std::move(m));
        }
    } catch (const nlohmann::json::exception &e) {
        throw InputError(std::string("metadata: ") + e.what());
    }
    validate_meta(meta);
    return meta;
}

inline std::vector<VariableMeta> load_meta(const std::string &path) {
    return meta_from_json(detail::read_json(path));
}

inline nlohmann::json item_bank_to_json(const ItemBank &bank) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto &it : bank.items)
        arr.push_back({{"id", it.id},
                       {"model", it.model == ItemModel::twopl ? "2PL" : "GPCM"},
                       {"a", it.a},
                       {"b", it.b}});
    return arr;
}

inline ItemBank item_bank_from_json(const nlohmann::json &j) {
    if (!j.is_array()) throw InputError("item bank must be a JSON array");
    ItemBank bank;
    try {
        for (const auto &o : j) {
            Item it;
            it.id = o.at("id").get<std::string>();
            const auto model = o.at("model").get<std::string>();
            if (model == "2PL")
                it.model = ItemModel::twopl;
            else if (model == "GPCM")
                it.model = ItemModel::gpcm;
            else
                throw InputError("item '" + it.id + "': unknown model '" + model + "'");
            it.a = o.at("a").get<double>();
            const auto &b = o.at("b");
            if (b.is_array())
                it.b = b.get<std::vector<double>>();
            else
                it.b = {b.get<double>()};
            // A single-step GPCM is the 2PL.
            if (it.model == ItemModel::gpcm && it.b.size() == 1) it.model = ItemModel::twopl;
            bank.items.push_back(std::move(it));
        }
    } catch (const nlohmann::json::exception &e) {
        throw InputError(std::string("item bank: ") + e.what());
    }
    bank.validate();
    return bank;
}

inline ItemBank load_item_bank(const std::string &path) {
    return item_bank_from_json(detail::read_json(path));
}

// ---------------------------------------------------------------------------
// Predictors

inline MixedDataset load_predictors(const std::string &csv_path, const std::string &meta_path) {
    auto meta = load_meta(meta_path);
    const auto table = detail::read_csv(csv_path);

    std::unordered_map<std::string, std::size_t> meta_index;
    for (std::size_t j = 0; j < meta.size(); ++j) meta_index[meta[j].name] = j;
    std::vector<std::size_t> col_of_meta(meta.size(), static_cast<std::size_t>(-1));
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        auto it = meta_index.find(table.header[c]);
        if (it == meta_index.end()) throw InputError("unknown column '" + table.header[c] + "'");
        col_of_meta[it->second] = c;
    }
    for (std::size_t j = 0; j < meta.size(); ++j)
        if (col_of_meta[j] == static_cast<std::size_t>(-1))
            throw InputError("column '" + meta[j].name + "' missing from '" + csv_path + "'");

    const auto n = static_cast<Eigen::Index>(table.rows.size());
    const auto p = static_cast<Eigen::Index>(meta.size());
    MixedDataset ds;
    ds.meta = std::move(meta);
    ds.values = RowMatrix::Constant(n, p, std::numeric_limits<double>::quiet_NaN());
    ds.observed = MaskMatrix::Constant(n, p, false);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < p; ++j) {
            const auto &cell = table.rows[i][col_of_meta[j]];
            if (detail::is_missing_token(cell)) continue;
            const std::string where = "column '" + ds.meta[j].name + "', row " + std::to_string(i + 1);
            ds.values(i, j) = detail::parse_double(cell, where);
            ds.observed(i, j) = true;
        }
    }
    ds.validate();
    return ds;
}

inline void save_predictors(const MixedDataset &ds, const std::string &csv_path,
                            const std::string &meta_path) {
    {
        std::ofstream out(csv_path);
        if (!out) throw InputError("cannot write '" + csv_path + "'");
        for (std::size_t j = 0; j < ds.meta.size(); ++j) out << (j ? "," : "") << ds.meta[j].name;
        out << '\n';
        for (Eigen::Index i = 0; i < ds.rows(); ++i) {
            for (Eigen::Index j = 0; j < ds.cols(); ++j) {
                if (j) out << ',';
                if (!ds.observed(i, j))
                    out << "NA";
                else if (ds.meta[j].discrete())
                    out << ds.code(i, j);
                else
                    out << detail::format_double(ds.values(i, j));
            }
            out << '\n';
        }
    }
    std::ofstream out(meta_path);
    if (!out) throw InputError("cannot write '" + meta_path + "'");
    out << meta_to_json(ds.meta).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Responses

inline ResponseData load_responses(const std::string &csv_path, const ItemBank &bank) {
    const auto table = detail::read_csv(csv_path);
    std::unordered_map<std::string, std::size_t> item_index;
    for (std::size_t l = 0; l < bank.size(); ++l) item_index[bank.items[l].id] = l;
    std::vector<std::size_t> col_of_item(bank.size(), static_cast<std::size_t>(-1));
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        auto it = item_index.find(table.header[c]);
        if (it == item_index.end()) throw InputError("unknown item column '" + table.header[c] + "'");
        col_of_item[it->second] = c;
    }
    for (std::size_t l = 0; l < bank.size(); ++l)
        if (col_of_item[l] == static_cast<std::size_t>(-1))
            throw InputError("item '" + bank.items[l].id + "' missing from '" + csv_path + "'");
    const auto n = static_cast<Eigen::Index>(table.rows.size());
    const auto J = static_cast<Eigen::Index>(bank.size());
    ResponseData rd;
    rd.codes = IntMatrix::Zero(n, J);
    rd.administered = MaskMatrix::Constant(n, J, false);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index l = 0; l < J; ++l) {
            const auto &cell = table.rows[i][col_of_item[l]];
            if (detail::is_missing_token(cell)) continue;
            const double v = detail::parse_double(
                cell, "item '" + bank.items[l].id + "', row " + std::to_string(i + 1));
            if (v != std::floor(v)) throw InputError("non-integer response code '" + cell + "'");
            rd.codes(i, l) = static_cast<int>(v);
            rd.administered(i, l) = true;
        }
    rd.validate(bank);
    return rd;
}

inline void save_responses(const ResponseData &rd, const ItemBank &bank, const std::string &csv_path) {
    std::ofstream out(csv_path);
    if (!out) throw InputError("cannot write '" + csv_path + "'");
    for (std::size_t l = 0; l < bank.size(); ++l) out << (l ? "," : "") << bank.items[l].id;
    out << '\n';
    for (Eigen::Index i = 0; i < rd.rows(); ++i) {
        for (Eigen::Index l = 0; l < rd.codes.cols(); ++l) {
            if (l) out << ',';
            if (rd.administered(i, l))
                out << rd.codes(i, l);
            else
                out << "NA";
        }
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Summaries and preprocessing

struct MissingnessSummary {
    std::vector<double> per_variable_rates;
    double complete_row_fraction = 0.0;
    double overall_rate = 0.0;
};

inline MissingnessSummary summarize_missingness(const MixedDataset &ds) {
    MissingnessSummary s;
    const auto n = ds.rows();
    const auto p = ds.cols();
    s.per_variable_rates.assign(p, 0.0);
    if (n == 0) return s;
    Eigen::Index complete = 0, missing = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        bool all = true;
        for (Eigen::Index j = 0; j < p; ++j)
            if (!ds.observed(i, j)) {
                s.per_variable_rates[j] += 1.0;
                all = false;
                ++missing;
            }
        complete += all;
    }
    for (auto &r : s.per_variable_rates) r /= static_cast<double>(n);
    s.complete_row_fraction = static_cast<double>(complete) / static_cast<double>(n);
    s.overall_rate = static_cast<double>(missing) / static_cast<double>(n * p);
    return s;
}

/// Merges ordinal categories whose observed share is below `min_fraction`
/// into the smaller adjacent category, repeating until every category clears
/// the floor or only two remain. Ordinals reduced to two categories become
/// binary.
inline MixedDataset merge_sparse_categories(MixedDataset ds, double min_fraction) {
    for (Eigen::Index j = 0; j < ds.cols(); ++j) {
        auto &m = ds.meta[j];
        if (m.kind != VarKind::ordinal) continue;
        // Contiguous groups of original categories: [first, last] and count.
        struct Group {
            int first, last;
            double count;
        };
        std::vector<Group> groups;
        for (int k = 0; k < m.n_categories; ++k) groups.push_back({k, k, 0.0});
        double total = 0.0;
        for (Eigen::Index i = 0; i < ds.rows(); ++i)
            if (ds.observed(i, j)) {
                groups[ds.code(i, j)].count += 1.0;
                total += 1.0;
            }
        if (total == 0.0) continue;
        while (groups.size() > 2) {
            std::size_t worst = groups.size();
            for (std::size_t g = 0; g < groups.size(); ++g)
                if (groups[g].count / total < min_fraction &&
                    (worst == groups.size() || groups[g].count < groups[worst].count))
                    worst = g;
            if (worst == groups.size()) break;
            std::size_t target;
            if (worst == 0)
                target = 1;
            else if (worst + 1 == groups.size())
                target = worst - 1;
            else
                target = groups[worst - 1].count <= groups[worst + 1].count ? worst - 1 : worst + 1;
            const std::size_t lo = std::min(worst, target), hi = std::max(worst, target);
            groups[lo] = {groups[lo].first, groups[hi].last, groups[lo].count + groups[hi].count};
            groups.erase(groups.begin() + static_cast<std::ptrdiff_t>(hi));
        }
        if (static_cast<int>(groups.size()) == m.n_categories) continue;
        std::vector<int> map(m.n_categories);
        for (std::size_t g = 0; g < groups.size(); ++g)
            for (int k = groups[g].first; k <= groups[g].last; ++k) map[k] = static_cast<int>(g);
        for (Eigen::Index i = 0; i < ds.rows(); ++i)
            if (ds.observed(i, j)) ds.values(i, j) = map[ds.code(i, j)];
        m.n_categories = static_cast<int>(groups.size());
        if (m.n_categories == 2) m.kind = VarKind::binary;
    }
    return ds;
}

} // namespace latko
