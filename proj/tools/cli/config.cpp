#include "cli/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace prnpe::cli {
namespace {

using Json = nlohmann::ordered_json;

struct Field {
  std::string key;
  std::string doc;
  std::function<Json(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

double to_double(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  double v = 0.0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || end != t.data() + t.size() || t.empty()) {
    throw ConfigError(key, "expected a number, got '" + text + "'");
  }
  if (!std::isfinite(v)) throw ConfigError(key, "must be finite");
  return v;
}

long long to_integer(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  long long v = 0;
  const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || end != t.data() + t.size() || t.empty()) {
    throw ConfigError(key, "expected an integer, got '" + text + "'");
  }
  return v;
}

bool to_bool(const std::string& key, const std::string& text) {
  const std::string t = lower(trim(text));
  if (t == "true" || t == "1" || t == "yes" || t == "on") return true;
  if (t == "false" || t == "0" || t == "no" || t == "off") return false;
  throw ConfigError(key, "expected a boolean, got '" + text + "'");
}

using Check = std::function<bool(double)>;

Check positive() {
  return [](double v) { return v > 0.0; };
}
Check nonnegative() {
  return [](double v) { return v >= 0.0; };
}
Check open_unit() {
  return [](double v) { return v > 0.0 && v < 1.0; };
}
Check at_least(double lo) {
  return [lo](double v) { return v >= lo; };
}

template <class T>
Field real(std::string key, std::string doc, T RunConfig::*outer, double T::*member, Check check = {},
           std::string rule = {}) {
  return {key, doc, [outer, member](const RunConfig& c) { return Json((c.*outer).*member); },
          [=](RunConfig& c, const std::string& text) {
            const double v = to_double(key, text);
            if (check && !check(v)) throw ConfigError(key, rule + ", got " + trim(text));
            (c.*outer).*member = v;
          }};
}

template <class T, class I>
Field integer(std::string key, std::string doc, T RunConfig::*outer, I T::*member, Check check = {},
              std::string rule = {}) {
  return {key, doc, [outer, member](const RunConfig& c) { return Json((c.*outer).*member); },
          [=](RunConfig& c, const std::string& text) {
            const long long v = to_integer(key, text);
            if (v < static_cast<long long>(std::numeric_limits<I>::min()) ||
                v > static_cast<long long>(std::numeric_limits<I>::max())) {
              throw ConfigError(key, "out of range, got " + trim(text));
            }
            if (check && !check(static_cast<double>(v))) throw ConfigError(key, rule + ", got " + trim(text));
            (c.*outer).*member = static_cast<I>(v);
          }};
}

template <class T>
Field boolean(std::string key, std::string doc, T RunConfig::*outer, bool T::*member) {
  return {key, doc, [outer, member](const RunConfig& c) { return Json((c.*outer).*member); },
          [=](RunConfig& c, const std::string& text) { (c.*outer).*member = to_bool(key, text); }};
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<Field> build_fields() {
  std::vector<Field> f;
  using P = pipeline::PipelineConfig;

  f.push_back({"task", "weibull | svar | linear-gaussian-toy",
               [](const RunConfig& c) { return Json(c.task); },
               [](RunConfig& c, const std::string& v) {
                 const std::string t = lower(trim(v));
                 if (t != "weibull" && t != "svar" && t != "linear-gaussian-toy") {
                   throw ConfigError("task", "unknown task '" + v + "'");
                 }
                 c.task = t;
               }});
  f.push_back({"methods", "comma-separated method list",
               [](const RunConfig& c) {
                 Json a = Json::array();
                 for (auto m : c.methods) a.push_back(pipeline::method_name(m));
                 return a;
               },
               [](RunConfig& c, const std::string& v) {
                 std::vector<pipeline::Method> ms;
                 for (const auto& name : split_list(v)) {
                   pipeline::Method m{};
                   try {
                     m = pipeline::parse_method(name);
                   } catch (const Error&) {
                     throw ConfigError("methods", "unknown method '" + name + "'");
                   }
                   if (std::find(ms.begin(), ms.end(), m) != ms.end()) {
                     throw ConfigError("methods", "duplicate method '" + name + "'");
                   }
                   ms.push_back(m);
                 }
                 if (ms.empty()) throw ConfigError("methods", "method list is empty");
                 c.methods = std::move(ms);
               }});
  f.push_back({"seed", "first replicate seed", [](const RunConfig& c) { return Json(c.seed); },
               [](RunConfig& c, const std::string& v) {
                 const long long s = to_integer("seed", v);
                 if (s < 0) throw ConfigError("seed", "must be nonnegative, got " + trim(v));
                 c.seed = static_cast<std::uint64_t>(s);
               }});
  f.push_back({"replicates", "number of replicates (seeds seed, seed+1, ...)",
               [](const RunConfig& c) { return Json(c.replicates); },
               [](RunConfig& c, const std::string& v) {
                 const long long r = to_integer("replicates", v);
                 if (r < 1 || r > 1000000) throw ConfigError("replicates", "must be positive, got " + trim(v));
                 c.replicates = static_cast<int>(r);
               }});
  f.push_back({"workers", "replicates run concurrently", [](const RunConfig& c) { return Json(c.workers); },
               [](RunConfig& c, const std::string& v) {
                 const long long w = to_integer("workers", v);
                 if (w < 1 || w > 1024) throw ConfigError("workers", "must lie in [1, 1024], got " + trim(v));
                 c.workers = static_cast<int>(w);
               }});
  f.push_back({"outdir", "output directory", [](const RunConfig& c) { return Json(c.outdir); },
               [](RunConfig& c, const std::string& v) {
                 if (trim(v).empty()) throw ConfigError("outdir", "must not be empty");
                 c.outdir = trim(v);
               }});
  f.push_back({"save_draws", "store posterior and predictive draws in reports",
               [](const RunConfig& c) { return Json(c.save_draws); },
               [](RunConfig& c, const std::string& v) { c.save_draws = to_bool("save_draws", v); }});

  f.push_back(integer("budget", "simulations per method and replicate", &RunConfig::pipeline, &P::budget,
                      positive(), "must be positive"));
  f.push_back(integer("posterior_samples", "posterior draws M", &RunConfig::pipeline, &P::posterior_samples,
                      at_least(100), "must be at least 100"));
  f.push_back(integer("ppd_draws", "posterior-predictive simulations", &RunConfig::pipeline, &P::ppd_draws,
                      positive(), "must be positive"));
  f.push_back(real("kappa", "order of the third gap moment", &RunConfig::pipeline, &P::kappa,
                   [](double v) { return v > 1.0; }, "must exceed 1"));

  // Nested sections go through a pipeline-level accessor.
  auto nested_real = [&f](std::string key, std::string doc, auto section, auto member, Check check = {},
                          std::string rule = {}) {
    f.push_back({key, doc,
                 [section, member](const RunConfig& c) { return Json((c.pipeline.*section).*member); },
                 [=](RunConfig& c, const std::string& text) {
                   const double v = to_double(key, text);
                   if (check && !check(v)) throw ConfigError(key, rule + ", got " + trim(text));
                   (c.pipeline.*section).*member = v;
                 }});
  };
  auto nested_int = [&f](std::string key, std::string doc, auto section, auto member, Check check = {},
                         std::string rule = {}) {
    f.push_back({key, doc,
                 [section, member](const RunConfig& c) { return Json((c.pipeline.*section).*member); },
                 [=](RunConfig& c, const std::string& text) {
                   const long long v = to_integer(key, text);
                   const Check ok = check ? check : nonnegative();
                   if (!ok(static_cast<double>(v))) {
                     throw ConfigError(key, (rule.empty() ? std::string("must be nonnegative") : rule) + ", got " +
                                                trim(text));
                   }
                   if (v > std::numeric_limits<int>::max()) throw ConfigError(key, "out of range, got " + trim(text));
                   using I = std::remove_reference_t<decltype((c.pipeline.*section).*member)>;
                   (c.pipeline.*section).*member = static_cast<I>(v);
                 }});
  };
  auto nested_bool = [&f](std::string key, std::string doc, auto section, auto member) {
    f.push_back({key, doc,
                 [section, member](const RunConfig& c) { return Json((c.pipeline.*section).*member); },
                 [=](RunConfig& c, const std::string& text) { (c.pipeline.*section).*member = to_bool(key, text); }});
  };

  using S = smc::SmcConfig;
  nested_int("smc.population", "SMC-ABC population size N", &P::smc, &S::population, at_least(2),
             "must be at least 2");
  nested_real("smc.alpha", "fraction dropped per generation", &P::smc, &S::alpha, open_unit(), "must lie in (0, 1)");
  nested_real("smc.eps0", "tolerance recorded before generation 1", &P::smc, &S::eps0, positive(),
              "must be positive");
  nested_real("smc.eps_min", "tolerance floor", &P::smc, &S::eps_min, nonnegative(), "must be nonnegative");
  nested_real("smc.p_min", "stop below this move acceptance rate", &P::smc, &S::p_min,
              [](double v) { return v >= 0.0 && v <= 1.0; }, "must lie in [0, 1]");
  nested_real("smc.dup_prob", "probability a duplicate is never moved", &P::smc, &S::dup_prob, open_unit(),
              "must lie in (0, 1)");
  nested_int("smc.max_generations", "generation cap T_max", &P::smc, &S::max_generations);
  nested_int("smc.max_init_retries", "redraws per particle on simulator failure", &P::smc, &S::max_init_retries,
             at_least(1), "must be at least 1");

  using T = forest::TreeConfig;
  nested_int("forest.trees", "trees per parameter B", &P::forest, &T::trees, at_least(1), "must be at least 1");
  nested_int("forest.max_depth", "maximum tree depth", &P::forest, &T::max_depth, at_least(1),
             "must be at least 1");
  nested_int("forest.min_leaf", "minimum leaf size", &P::forest, &T::min_leaf, at_least(1), "must be at least 1");
  nested_int("forest.min_split", "minimum node size to split", &P::forest, &T::min_split, at_least(2),
             "must be at least 2");
  nested_real("forest.min_impurity_decrease", "split gain threshold", &P::forest, &T::min_impurity_decrease,
              nonnegative(), "must be nonnegative");
  nested_bool("forest.bootstrap", "bootstrap each tree", &P::forest, &T::bootstrap);
  nested_real("forest.fit_fraction", "fraction of rows drawn per tree", &P::forest, &T::fit_fraction,
              [](double v) { return v > 0.0 && v <= 1.0; }, "must lie in (0, 1]");
  f.push_back(boolean("forest.resample_training", "train forest methods on a resample", &RunConfig::pipeline,
                      &P::forest_resample_training));
  f.push_back(integer("forest.resample_size", "resample size (0 = budget)", &RunConfig::pipeline,
                      &P::forest_resample_size, nonnegative(), "must be nonnegative"));

  using A = flow::FlowArchitecture;
  nested_int("flow.layers", "coupling layers", &P::flow, &A::layers, at_least(1), "must be at least 1");
  nested_int("flow.hidden", "conditioner hidden units", &P::flow, &A::hidden, at_least(1), "must be at least 1");
  nested_int("flow.bins", "spline bins K", &P::flow, &A::bins, at_least(2), "must be at least 2");
  nested_real("flow.bound", "spline interval half-width", &P::flow, &A::bound, positive(), "must be positive");
  nested_real("flow.min_bin", "minimum bin width and height", &P::flow, &A::min_bin, open_unit(),
              "must lie in (0, 1)");
  nested_real("flow.min_derivative", "minimum knot derivative", &P::flow, &A::min_derivative,
              [](double v) { return v >= 0.0 && v < 1.0; }, "must lie in [0, 1)");

  using R = flow::TrainConfig;
  nested_real("train.learning_rate", "Adam learning rate", &P::train, &R::learning_rate, positive(),
              "must be positive");
  nested_int("train.batch_size", "minibatch size", &P::train, &R::batch_size, at_least(1), "must be at least 1");
  nested_int("train.patience", "early-stopping patience (epochs)", &P::train, &R::patience, at_least(1),
             "must be at least 1");
  nested_int("train.max_epochs", "epoch cap", &P::train, &R::max_epochs);
  nested_real("train.validation_fraction", "held-out fraction", &P::train, &R::validation_fraction,
              [](double v) { return v >= 0.0 && v < 1.0; }, "must lie in [0, 1)");
  nested_real("train.beta1", "Adam first-moment decay", &P::train, &R::beta1,
              [](double v) { return v >= 0.0 && v < 1.0; }, "must lie in [0, 1)");
  nested_real("train.beta2", "Adam second-moment decay", &P::train, &R::beta2,
              [](double v) { return v >= 0.0 && v < 1.0; }, "must lie in [0, 1)");
  nested_real("train.adam_eps", "Adam epsilon", &P::train, &R::adam_eps, positive(), "must be positive");

  using E = denoise::ErrorModel;
  nested_real("error.sigma_spike", "spike scale", &P::error, &E::sigma_spike, positive(), "must be positive");
  nested_real("error.sigma_slab", "slab scale", &P::error, &E::sigma_slab, positive(), "must be positive");
  nested_real("error.gamma", "slab weight", &P::error, &E::gamma, [](double v) { return v >= 0.0 && v < 1.0; },
              "must lie in [0, 1)");
  f.push_back({"error.slab", "cauchy | gaussian",
               [](const RunConfig& c) {
                 return Json(c.pipeline.error.slab == denoise::SlabFamily::Cauchy ? "cauchy" : "gaussian");
               },
               [](RunConfig& c, const std::string& v) {
                 const std::string s = lower(trim(v));
                 if (s == "cauchy") {
                   c.pipeline.error.slab = denoise::SlabFamily::Cauchy;
                 } else if (s == "gaussian") {
                   c.pipeline.error.slab = denoise::SlabFamily::Gaussian;
                 } else {
                   throw ConfigError("error.slab", "expected cauchy or gaussian, got '" + v + "'");
                 }
               }});

  using N = denoise::NutsConfig;
  nested_real("nuts.target_accept", "target acceptance statistic", &P::nuts, &N::target_accept, open_unit(),
              "must lie in (0, 1)");
  nested_int("nuts.warmup", "warmup iterations", &P::nuts, &N::warmup);
  nested_int("nuts.max_depth", "maximum tree depth", &P::nuts, &N::max_depth, at_least(1), "must be at least 1");
  nested_real("nuts.max_energy_error", "divergence threshold", &P::nuts, &N::max_energy_error, positive(),
              "must be positive");
  nested_bool("nuts.adapt_metric", "adapt a diagonal metric", &P::nuts, &N::adapt_metric);

  using W = models::WeibullTask;
  f.push_back(integer("weibull.n", "observations per dataset", &RunConfig::weibull, &W::n, at_least(2),
                      "must be at least 2"));
  f.push_back(real("weibull.contamination", "contaminated fraction", &RunConfig::weibull, &W::contamination,
                   [](double v) { return v >= 0.0 && v < 1.0; }, "must lie in [0, 1)"));
  f.push_back(real("weibull.contaminant_mean", "contaminant mean", &RunConfig::weibull, &W::contaminant_mean));
  f.push_back(real("weibull.contaminant_sd", "contaminant sd", &RunConfig::weibull, &W::contaminant_sd,
                   nonnegative(), "must be nonnegative"));
  f.push_back(real("weibull.true_shape", "shape of the observed process", &RunConfig::weibull, &W::true_shape,
                   positive(), "must be positive"));

  using V = models::SvarTask;
  f.push_back(integer("svar.length", "series length T", &RunConfig::svar, &V::length, at_least(2),
                      "must be at least 2"));
  f.push_back(real("svar.drift", "drift of the observed process", &RunConfig::svar, &V::drift));

  using G = models::LinearGaussianTask;
  f.push_back(real("toy.noise_sd", "summary noise sd", &RunConfig::toy, &G::noise_sd, positive(),
                   "must be positive"));
  f.push_back(real("toy.true_theta", "parameter of the observed process", &RunConfig::toy, &G::true_theta));
  return f;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = build_fields();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return f;
  }
  throw ConfigError(key, "unknown key");
}

// Flattens JSON objects to dotted keys; arrays become comma lists.
void flatten(const nlohmann::json& j, const std::string& prefix, std::vector<std::pair<std::string, std::string>>& out) {
  if (j.is_object()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      flatten(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    }
    return;
  }
  if (j.is_array()) {
    std::string joined;
    for (const auto& e : j) {
      if (!joined.empty()) joined += ",";
      joined += e.is_string() ? e.get<std::string>() : e.dump();
    }
    out.emplace_back(prefix, joined);
    return;
  }
  out.emplace_back(prefix, j.is_string() ? j.get<std::string>() : j.dump());
}

void flatten(const boost::property_tree::ptree& t, const std::string& prefix,
             std::vector<std::pair<std::string, std::string>>& out) {
  for (const auto& [name, child] : t) {
    const std::string key = prefix.empty() ? name : prefix + "." + name;
    if (child.empty()) {
      out.emplace_back(key, child.data());
    } else {
      flatten(child, key, out);
    }
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read config file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string default_outdir() {
  const char* env = std::getenv("PRNPE_OUTDIR");
  return env && *env ? std::string(env) : std::string("results");
}

void set_value(RunConfig& config, const std::string& key, const std::string& value) {
  find_field(trim(key)).set(config, value);
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error("override '" + assignment + "' is not of the form key=value");
  set_value(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

void validate(const RunConfig& c) {
  if (c.methods.empty()) throw ConfigError("methods", "method list is empty");
  const auto& p = c.pipeline;
  const bool uses_smc = std::any_of(c.methods.begin(), c.methods.end(), [](pipeline::Method m) {
    return pipeline::preconditioner(m) == pipeline::Preconditioner::Smc;
  });
  if (uses_smc && p.smc.population > p.budget) {
    throw ConfigError("smc.population", "exceeds the budget of " + std::to_string(p.budget));
  }
  if (p.smc.alpha * static_cast<double>(p.smc.population) < 1.0) {
    throw ConfigError("smc.alpha", "alpha * population must drop at least one particle");
  }
  const std::pair<const char*, std::function<void()>> checks[] = {
      {"smc", [&] { p.smc.validate(); }},         {"forest", [&] { p.forest.validate(); }},
      {"flow", [&] { p.flow.validate(); }},       {"train", [&] { p.train.validate(); }},
      {"error", [&] { p.error.validate(); }},     {"nuts", [&] { p.nuts.validate(); }},
      {"pipeline", [&] { p.validate(); }},
  };
  for (const auto& [section, check] : checks) {
    try {
      check();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(section, e.what());
    }
  }
}

RunConfig parse_config(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig config;
  config.outdir = default_outdir();
  if (!path.empty()) {
    std::vector<std::pair<std::string, std::string>> entries;
    const std::string text = read_file(path);
    const bool is_json = path.size() >= 5 && lower(path.substr(path.size() - 5)) == ".json";
    if (is_json) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception& e) {
        throw Error("config file '" + path + "' is not valid JSON: " + e.what());
      }
      if (!j.is_object()) throw Error("config file '" + path + "' must hold a JSON object");
      flatten(j, "", entries);
    } else {
      boost::property_tree::ptree tree;
      std::istringstream in(text);
      try {
        boost::property_tree::ini_parser::read_ini(in, tree);
      } catch (const boost::property_tree::ini_parser_error& e) {
        throw Error("config file '" + path + "': " + e.message() + " at line " + std::to_string(e.line()));
      }
      flatten(tree, "", entries);
    }
    for (const auto& [key, value] : entries) set_value(config, key, value);
  }
  for (const auto& o : overrides) apply_override(config, o);
  validate(config);
  return config;
}

nlohmann::ordered_json echo(const RunConfig& config) {
  Json out = Json::object();
  for (const auto& f : fields()) {
    Json* node = &out;
    std::string key = f.key;
    std::size_t dot;
    while ((dot = key.find('.')) != std::string::npos) {
      node = &(*node)[key.substr(0, dot)];
      key = key.substr(dot + 1);
    }
    (*node)[key] = f.get(config);
  }
  return out;
}

RunConfig from_echo(const nlohmann::json& j) {
  std::vector<std::pair<std::string, std::string>> entries;
  flatten(j, "", entries);
  RunConfig config;
  config.outdir = default_outdir();
  for (const auto& [key, value] : entries) set_value(config, key, value);
  validate(config);
  return config;
}

std::string key_reference() {
  RunConfig defaults;
  defaults.outdir = "$PRNPE_OUTDIR or results";
  std::ostringstream out;
  std::size_t width = 0;
  for (const auto& f : fields()) width = std::max(width, f.key.size());
  for (const auto& f : fields()) {
    const Json v = f.get(defaults);
    std::string shown;
    if (v.is_string()) {
      shown = v.get<std::string>();
    } else if (v.is_array()) {
      for (const auto& e : v) shown += (shown.empty() ? "" : ",") + e.get<std::string>();
    } else {
      shown = v.dump();
    }
    out << "  " << f.key << std::string(width - f.key.size() + 2, ' ') << shown << "  (" << f.doc << ")\n";
  }
  return out.str();
}

std::unique_ptr<models::Task> make_task(const RunConfig& config) {
  if (config.task == "weibull") return std::make_unique<models::WeibullModel>(config.weibull);
  if (config.task == "svar") return std::make_unique<models::SvarModel>(config.svar);
  if (config.task == "linear-gaussian-toy") return std::make_unique<models::LinearGaussianModel>(config.toy);
  throw ConfigError("task", "unknown task '" + config.task + "'");
}

}  // namespace prnpe::cli
