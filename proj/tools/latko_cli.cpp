// latko: command-line front end for copula fitting, knockoff selection and
// the simulation study.

#include "latko/latko.hpp"

#include <CLI11.hpp>
#include <toml.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace latko;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitNumerical = 3;

struct UsageError : InputError {
    using InputError::InputError;
};

void emit_error(const std::string &kind, const std::string &message) {
    nlohmann::json j = {{"error", {{"type", kind}, {"message", message}}}};
    std::cerr << j.dump() << '\n';
}

std::vector<int> parse_int_list(const std::string &s, const std::string &flag) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = detail::trim(tok);
        if (tok.empty()) continue;
        try {
            std::size_t used = 0;
            const int v = std::stoi(tok, &used);
            if (used != tok.size()) throw std::invalid_argument(tok);
            out.push_back(v);
        } catch (const std::exception &) {
            throw UsageError(flag + ": '" + tok + "' is not an integer");
        }
    }
    if (out.empty()) throw UsageError(flag + " needs at least one value");
    return out;
}

void write_text(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path.string() + "'");
    out << text;
}

void write_json(const fs::path &path, const nlohmann::json &j) { write_text(path, j.dump(2) + "\n"); }

// ---------------------------------------------------------------------------
// Configuration: defaults <- TOML file <- command-line flags

struct Config {
    std::uint64_t seed = 1;
    int threads = 1;
    std::string out = ".";

    std::string predictors, meta, responses, items, copula_path;
    double merge_below = 0.0;

    FitConfig copula{};
    EmConfig em{};
    DerandomizedConfig knockoff{};
    std::string s_method = "mvr";
    int bootstrap = 0;
    bool fit_copula_inline = false;

    StudyConfig study = StudyConfig::desk();
};

class TomlReader {
  public:
    TomlReader(const toml::table &t, fs::path base) : t_(t), base_(std::move(base)) {}

    template <class T> void get(const char *section, const char *key, T &out) const {
        const toml::node *n = lookup(section, key);
        if (!n) return;
        if constexpr (std::is_same_v<T, std::string>) {
            auto v = n->value<std::string>();
            if (!v) bad(section, key, "a string");
            out = *v;
        } else if constexpr (std::is_same_v<T, double>) {
            auto v = n->value<double>();
            if (!v) bad(section, key, "a number");
            out = *v;
        } else if constexpr (std::is_same_v<T, bool>) {
            auto v = n->value<bool>();
            if (!v) bad(section, key, "a boolean");
            out = *v;
        } else if constexpr (std::is_integral_v<T>) {
            auto v = n->value<std::int64_t>();
            if (!v) bad(section, key, "an integer");
            if constexpr (std::is_unsigned_v<T>)
                if (*v < 0) bad(section, key, "a non-negative integer");
            out = static_cast<T>(*v);
        } else if constexpr (std::is_same_v<T, std::vector<int>>) {
            out.clear();
            if (auto v = n->value<std::int64_t>()) {
                out.push_back(static_cast<int>(*v));
                return;
            }
            const auto *arr = n->as_array();
            if (!arr) bad(section, key, "an integer or an array of integers");
            for (const auto &e : *arr) {
                auto v = e.value<std::int64_t>();
                if (!v) bad(section, key, "an array of integers");
                out.push_back(static_cast<int>(*v));
            }
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            const auto *arr = n->as_array();
            if (!arr) bad(section, key, "an array of numbers");
            out.clear();
            for (const auto &e : *arr) {
                auto v = e.value<double>();
                if (!v) bad(section, key, "an array of numbers");
                out.push_back(*v);
            }
        }
    }

    void path(const char *section, const char *key, std::string &out) const {
        std::string v;
        get(section, key, v);
        if (v.empty()) return;
        const fs::path p(v);
        out = p.is_absolute() ? v : (base_ / p).string();
    }

  private:
    const toml::node *lookup(const char *section, const char *key) const {
        if (!section) return t_.get(key);
        const auto *sec = t_.get_as<toml::table>(section);
        return sec ? sec->get(key) : nullptr;
    }
    [[noreturn]] static void bad(const char *section, const char *key, const char *what) {
        throw UsageError(std::string("config: ") + (section ? std::string(section) + "." : "") + key + " must be " + what);
    }
    const toml::table &t_;
    fs::path base_;
};

void apply_toml(const std::string &path, Config &c) {
    if (!fs::exists(path)) throw UsageError("config file '" + path + "' does not exist");
    toml::table t;
    try {
        t = toml::parse_file(path);
    } catch (const toml::parse_error &e) {
        throw UsageError("config '" + path + "': " + std::string(e.description()));
    }
    const TomlReader r(t, fs::path(path).parent_path());
    r.get(nullptr, "seed", c.seed);
    r.get(nullptr, "threads", c.threads);
    r.path(nullptr, "out", c.out);

    r.path("data", "predictors", c.predictors);
    r.path("data", "meta", c.meta);
    r.path("data", "responses", c.responses);
    r.path("data", "items", c.items);
    r.path("data", "copula", c.copula_path);
    r.get("data", "merge_below", c.merge_below);

    r.get("copula", "burn_in", c.copula.burn_in);
    r.get("copula", "iters", c.copula.iters);
    r.get("copula", "step_exponent", c.copula.step_exponent);
    r.get("copula", "gibbs_scans_per_iter", c.copula.gibbs_scans_per_iter);

    r.get("regression", "burn_in", c.em.burn_in);
    r.get("regression", "iters", c.em.iters);

    r.get("knockoff", "runs", c.knockoff.M);
    r.get("knockoff", "eta", c.knockoff.eta);
    r.get("knockoff", "nu", c.knockoff.nus);
    r.get("knockoff", "s_method", c.s_method);
    r.get("knockoff", "gibbs_sweeps", c.knockoff.sampler.gibbs_sweeps);
    r.get("knockoff", "burn_in", c.knockoff.em.burn_in);
    r.get("knockoff", "iters", c.knockoff.em.iters);

    r.get("bootstrap", "replications", c.bootstrap);

    std::string preset;
    r.get("study", "preset", preset);
    if (!preset.empty()) c.study = StudyConfig::preset(parse_preset(preset));
    auto &s = c.study;
    r.get("study", "p", s.p);
    r.get("study", "J", s.J);
    std::vector<int> ns;
    r.get("study", "N", ns);
    if (!ns.empty()) {
        s.sample_sizes = ns;
        s.N = ns.front();
    }
    r.get("study", "replications", s.replications);
    r.get("study", "nu", s.nu_levels);
    r.get("study", "runs", s.M);
    r.get("study", "eta", s.eta);
    r.get("study", "nonnull", s.nonnull);
    r.get("study", "nonnull_beta", s.nonnull_beta);
    r.get("study", "binary_thresholds", s.binary_thresholds);
    r.get("study", "s_method", s.s_method);
    r.get("study", "gibbs_sweeps", s.gibbs_sweeps);
    r.get("study", "copula_burn_in", s.copula.burn_in);
    r.get("study", "copula_iters", s.copula.iters);
    r.get("study", "regression_burn_in", s.em.burn_in);
    r.get("study", "regression_iters", s.em.iters);
    r.get("study", "knockoff_burn_in", s.knockoff_em.burn_in);
    r.get("study", "knockoff_iters", s.knockoff_em.iters);
}

struct Flags {
    std::string config, out, nu, s_method, preset, n_list;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads, runs, bootstrap, replications, burn_in, iters, gibbs_sweeps;
    std::optional<double> eta, merge_below;
    std::string predictors, meta, responses, items, copula_path;
    bool dry_run = false, fit_copula = false;
    std::string dump_data;
};

Config resolve(const Flags &f) {
    Config c;
    if (!f.config.empty()) apply_toml(f.config, c);
    if (f.seed) c.seed = *f.seed;
    if (f.threads) c.threads = *f.threads;
    if (!f.out.empty()) c.out = f.out;
    if (!f.predictors.empty()) c.predictors = f.predictors;
    if (!f.meta.empty()) c.meta = f.meta;
    if (!f.responses.empty()) c.responses = f.responses;
    if (!f.items.empty()) c.items = f.items;
    if (!f.copula_path.empty()) c.copula_path = f.copula_path;
    if (f.merge_below) c.merge_below = *f.merge_below;
    if (f.runs) c.knockoff.M = *f.runs;
    if (f.eta) c.knockoff.eta = *f.eta;
    if (!f.nu.empty()) c.knockoff.nus = parse_int_list(f.nu, "--nu");
    if (!f.s_method.empty()) c.s_method = f.s_method;
    if (f.bootstrap) c.bootstrap = *f.bootstrap;
    if (f.burn_in) c.copula.burn_in = *f.burn_in;
    if (f.iters) c.copula.iters = *f.iters;
    if (f.gibbs_sweeps) c.knockoff.sampler.gibbs_sweeps = *f.gibbs_sweeps;
    c.fit_copula_inline = f.fit_copula;
    if (c.threads < 1) throw UsageError("--threads must be >= 1");
    if (c.s_method != "mvr" && c.s_method != "equi") throw UsageError("--s-method must be mvr or equi");
    if (c.bootstrap < 0 || c.bootstrap == 1) throw UsageError("--bootstrap needs B >= 2 (or 0 to skip)");
    c.copula.seed = stream_seed(c.seed, 1);
    c.copula.threads = c.threads;
    c.em.seed = stream_seed(c.seed, 2);
    c.em.threads = c.threads;
    c.knockoff.base_seed = stream_seed(c.seed, 3);
    c.knockoff.threads = c.threads;

    // Study: preset first, then explicit overrides.
    if (!f.preset.empty()) c.study = StudyConfig::preset(parse_preset(f.preset));
    auto &s = c.study;
    s.seed = c.seed;
    s.threads = c.threads;
    if (f.replications) s.replications = *f.replications;
    if (!f.nu.empty()) s.nu_levels = c.knockoff.nus;
    if (f.runs) s.M = *f.runs;
    if (f.eta) s.eta = *f.eta;
    if (!f.s_method.empty()) s.s_method = f.s_method;
    if (f.gibbs_sweeps) s.gibbs_sweeps = *f.gibbs_sweeps;
    if (!f.n_list.empty()) {
        s.sample_sizes = parse_int_list(f.n_list, "--n");
        s.N = s.sample_sizes.front();
    }
    return c;
}

void require_file(const std::string &path, const std::string &what) {
    if (path.empty()) throw UsageError("missing " + what + " path");
    if (!fs::exists(path)) throw UsageError(what + " file '" + path + "' does not exist");
}

MixedDataset load_data(const Config &c) {
    require_file(c.predictors, "predictors");
    require_file(c.meta, "meta");
    auto ds = load_predictors(c.predictors, c.meta);
    if (c.merge_below > 0.0) ds = merge_sparse_categories(std::move(ds), c.merge_below);
    return ds;
}

void check_copula_matches(const CopulaParams &xi, const MixedDataset &ds) {
    if (xi.dim() != ds.cols()) throw InputError("copula dimension does not match the predictors");
    for (Eigen::Index j = 0; j < ds.cols(); ++j) {
        const auto &m = xi.margins[j];
        if (m.discrete != ds.meta[j].discrete() || (m.discrete && m.n_thresholds() != ds.meta[j].n_thresholds()))
            throw InputError("copula margin " + std::to_string(j) + " does not match variable '" + ds.meta[j].name + "'");
    }
}

std::string fit_log_csv(const CopulaFit &fit) {
    std::ostringstream os;
    os << "iteration,step_size,objective,smoothed_objective\n";
    for (std::size_t t = 0; t < fit.objective.size(); ++t) {
        os << t + 1 << ',' << detail::format_double(t < fit.step_sizes.size() ? fit.step_sizes[t] : 0.0) << ','
           << detail::format_double(fit.objective[t]) << ','
           << detail::format_double(t < fit.smoothed_objective.size() ? fit.smoothed_objective[t] : fit.objective[t])
           << '\n';
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Commands

int cmd_fit_copula(const Config &c) {
    const auto ds = load_data(c);
    const auto fit = fit_copula(ds, std::nullopt, c.copula);
    fs::create_directories(c.out);
    write_json(fs::path(c.out) / "copula.json", copula_to_json(fit.params, ds.meta, &c.copula));
    write_text(fs::path(c.out) / "fit_log.csv", fit_log_csv(fit));
    std::cerr << "wrote " << (fs::path(c.out) / "copula.json").string() << '\n';
    return 0;
}

std::string block_string(const Vector &v) {
    std::string s;
    for (Eigen::Index k = 0; k < v.size(); ++k) s += (k ? ";" : "") + detail::format_double(v[k]);
    return s;
}

int cmd_select(const Config &c) {
    const auto ds = load_data(c);
    require_file(c.items, "items");
    require_file(c.responses, "responses");
    const auto bank = load_item_bank(c.items);
    const auto rd = load_responses(c.responses, bank);
    fs::create_directories(c.out);

    CopulaParams xi;
    if (c.fit_copula_inline) {
        const auto fit = fit_copula(ds, std::nullopt, c.copula);
        xi = fit.params;
        write_json(fs::path(c.out) / "copula.json", copula_to_json(xi, ds.meta, &c.copula));
        write_text(fs::path(c.out) / "fit_log.csv", fit_log_csv(fit));
    } else {
        const std::string path = c.copula_path.empty() ? (fs::path(c.out) / "copula.json").string() : c.copula_path;
        if (!fs::exists(path))
            throw UsageError("copula file '" + path + "' does not exist (run fit-copula or pass --fit-copula)");
        xi = copula_from_json(detail::read_json(path));
    }
    check_copula_matches(xi, ds);

    const LatentRegressionData data(ds, rd, bank);
    const auto plain = fit_latent_regression(data, xi, xi.sigma(), c.em);
    const auto s = choose_s(xi.sigma(), c.s_method);
    const auto sel = derandomized_select(data, xi, plain, s, c.knockoff);

    std::optional<BootstrapResult> boot;
    if (c.bootstrap >= 2) {
        auto refit = [&](const MixedDataset &d, const ResponseData &r, int b) {
            EmConfig em = c.em;
            em.seed = stream_seed(c.seed, 4, static_cast<std::uint64_t>(b));
            em.threads = 1;
            const LatentRegressionData bd(d, r, bank);
            return fit_latent_regression(bd, xi, xi.sigma(), em).params.flat();
        };
        boot = bootstrap_se(ds, rd, refit, c.bootstrap, stream_seed(c.seed, 5), c.threads);
    }

    // selection.json
    nlohmann::json j = selection_to_json(sel, ds.meta, c.knockoff);
    j["config"]["s_method"] = c.s_method;
    j["config"]["seed"] = c.seed;
    j["s"] = std::vector<double>(s.s.data(), s.s.data() + s.s.size());
    j["s_converged"] = s.converged;
    j["regression"] = regression_to_json(plain.params, ds.meta, &c.em);
    if (boot) {
        j["bootstrap"] = {{"replications", boot->replicates},
                          {"failed", boot->failed},
                          {"failures", boot->failures},
                          {"se", std::vector<double>(boot->se.data(), boot->se.data() + boot->se.size())}};
    }
    write_json(fs::path(c.out) / "selection.json", j);

    // selection.csv ranked by Pi (smallest nu first), ties alphabetical.
    const auto p = ds.cols();
    std::vector<int> order(p);
    std::iota(order.begin(), order.end(), 0);
    std::vector<int> nus = c.knockoff.nus;
    std::sort(nus.begin(), nus.end());
    nus.erase(std::unique(nus.begin(), nus.end()), nus.end());
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (int nu : nus) {
            const double pa = sel.at(nu).pi[a], pb = sel.at(nu).pi[b];
            if (pa != pb) return pa > pb;
        }
        return ds.meta[a].name < ds.meta[b].name;
    });
    std::vector<int> offset(p);
    int o = 1;
    for (Eigen::Index k = 0; k < p; ++k) {
        offset[k] = o;
        o += ds.meta[k].block_size();
    }
    std::ostringstream csv;
    csv << "variable";
    for (int nu : nus) csv << ",pi_nu" << nu << ",selected_nu" << nu;
    csv << ",beta,se\n";
    for (int k : order) {
        csv << ds.meta[k].name;
        for (int nu : nus) {
            const auto &r = sel.at(nu);
            const bool chosen = std::binary_search(r.selected.begin(), r.selected.end(), k);
            csv << ',' << detail::format_double(r.pi[k]) << ',' << (chosen ? 1 : 0);
        }
        csv << ',' << block_string(plain.params.beta[k]) << ',';
        if (boot) csv << block_string(boot->se.segment(offset[k], ds.meta[k].block_size()));
        csv << '\n';
    }
    write_text(fs::path(c.out) / "selection.csv", csv.str());
    std::cerr << "wrote " << (fs::path(c.out) / "selection.json").string() << '\n';
    return 0;
}

int cmd_simulate(const Config &c, bool dry_run, const std::string &dump_data) {
    const auto &s = c.study;
    s.validate();
    if (!dump_data.empty()) {
        Rng sigma_rng(stream_seed(s.seed, 0x5167));
        const Matrix sigma = build_sigma_blocks(s.p, sigma_rng);
        for (int n : s.sizes()) {
            Rng rng(stream_seed(s.seed, static_cast<std::uint64_t>(n), 0));
            const auto d = generate_study(s, sigma, n, rng);
            const fs::path dir = fs::path(dump_data) / ("N" + std::to_string(n));
            fs::create_directories(dir);
            save_predictors(d.ds, (dir / "predictors.csv").string(), (dir / "meta.json").string());
            save_responses(d.rd, d.truth.bank, (dir / "responses.csv").string());
            write_json(dir / "items.json", item_bank_to_json(d.truth.bank));
        }
    }
    if (dry_run) {
        std::cout << study_config_to_json(s).dump(2) << '\n';
        return 0;
    }
    auto progress = [](const ReplicationRecord &r) {
        std::cerr << "N=" << r.N << " replication " << r.index << (r.failed ? " failed: " + r.error : " done") << '\n';
    };
    const auto rep = run_study(s, c.threads, progress);
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / "table1.csv", table1_csv(rep.table));
    write_json(fs::path(c.out) / "report.json", study_report_json(rep));
    std::ostringstream timing;
    timing << "total_seconds " << rep.seconds << '\n';
    for (const auto &r : rep.records) timing << "N=" << r.N << " replication=" << r.index << " seconds=" << r.seconds << '\n';
    write_text(fs::path(c.out) / "timing.txt", timing.str());
    std::cout << table1_csv(rep.table);
    return 0;
}

void add_common(CLI::App *cmd, Flags &f) {
    cmd->add_option("--config", f.config, "TOML configuration file");
    cmd->add_option("--seed", f.seed, "64-bit seed");
    cmd->add_option("--threads", f.threads, "worker threads");
    cmd->add_option("--out", f.out, "output directory");
}

void add_data(CLI::App *cmd, Flags &f) {
    cmd->add_option("--predictors", f.predictors, "predictor CSV");
    cmd->add_option("--meta", f.meta, "variable metadata JSON");
    cmd->add_option("--merge-below", f.merge_below, "merge categories rarer than this fraction");
    cmd->add_option("--burn-in", f.burn_in, "copula burn-in iterations");
    cmd->add_option("--iters", f.iters, "copula averaging iterations");
}

void add_knockoff(CLI::App *cmd, Flags &f) {
    cmd->add_option("--nu", f.nu, "PFER levels, e.g. 1,2,3");
    cmd->add_option("--runs", f.runs, "number of knockoff runs M");
    cmd->add_option("--eta", f.eta, "selection-frequency threshold");
    cmd->add_option("--s-method", f.s_method, "mvr or equi");
    cmd->add_option("--gibbs-sweeps", f.gibbs_sweeps, "Gibbs sweeps before each knockoff draw");
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"latko: knockoff variable selection for latent regression with missing mixed predictors"};
    app.require_subcommand(1);
    Flags f;

    auto *fit = app.add_subcommand("fit-copula", "estimate the Gaussian copula (writes copula.json, fit_log.csv)");
    add_common(fit, f);
    add_data(fit, f);

    auto *sel = app.add_subcommand("select", "knockoff selection (writes selection.json, selection.csv)");
    add_common(sel, f);
    add_data(sel, f);
    add_knockoff(sel, f);
    sel->add_option("--responses", f.responses, "item response CSV");
    sel->add_option("--items", f.items, "item bank JSON");
    sel->add_option("--copula", f.copula_path, "fitted copula JSON");
    sel->add_flag("--fit-copula", f.fit_copula, "fit the copula first");
    sel->add_option("--bootstrap", f.bootstrap, "bootstrap replications for standard errors");

    auto *sim = app.add_subcommand("simulate", "simulation study (writes table1.csv, report.json)");
    add_common(sim, f);
    add_knockoff(sim, f);
    sim->add_option("--preset", f.preset, "desk or paper");
    sim->add_option("--replications", f.replications, "replications per sample size");
    sim->add_option("--n", f.n_list, "sample sizes, e.g. 500,2000");
    sim->add_flag("--dry-run", f.dry_run, "print the resolved configuration and exit");
    sim->add_option("--dump-data", f.dump_data, "write the first replication's data for each N here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        emit_error("usage", e.what());
        return kExitUsage;
    }

    try {
        const Config c = resolve(f);
        if (fit->parsed()) return cmd_fit_copula(c);
        if (sel->parsed()) return cmd_select(c);
        return cmd_simulate(c, f.dry_run, f.dump_data);
    } catch (const NumericalError &e) {
        emit_error("numerical", e.what());
        return kExitNumerical;
    } catch (const InputError &e) {
        emit_error("input", e.what());
        return kExitUsage;
    } catch (const fs::filesystem_error &e) {
        emit_error("io", e.what());
        return kExitUsage;
    } catch (const std::exception &e) {
        emit_error("numerical", e.what());
        return kExitNumerical;
    }
}
