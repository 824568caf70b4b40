#include "bsr/harness/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"

namespace bsr::harness {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

using Setter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

template <class T>
Setter num(T RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_number<T>(k, v); };
}

Setter flag(bool RunConfig::*field) {
  return [field](RunConfig& c, const std::string& k, const std::string& v) { c.*field = parse_bool(k, v); };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"data_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.data_dir = v; }},
      {"run_dir", [](RunConfig& c, const std::string&, const std::string& v) { c.run_dir = v; }},
      {"height", num(&RunConfig::height)},
      {"width", num(&RunConfig::width)},
      {"k", num(&RunConfig::num_classes)},
      {"n", num(&RunConfig::n)},
      {"m", num(&RunConfig::m)},
      {"n_test", num(&RunConfig::n_test)},
      {"data_seed", num(&RunConfig::data_seed)},
      {"init_seed", num(&RunConfig::init_seed)},
      {"train_seed", num(&RunConfig::train_seed)},
      {"cluster_seed", num(&RunConfig::cluster_seed)},
      {"phase1_iters", num(&RunConfig::phase1_iters)},
      {"total_iters", num(&RunConfig::total_iters)},
      {"batch_size", num(&RunConfig::batch_size)},
      {"learning_rate", num(&RunConfig::learning_rate)},
      {"momentum", num(&RunConfig::momentum)},
      {"ema_decay", num(&RunConfig::ema_decay)},
      {"grad_clip", num(&RunConfig::grad_clip)},
      {"alpha", num(&RunConfig::alpha)},
      {"beta1", num(&RunConfig::beta1)},
      {"beta2", num(&RunConfig::beta2)},
      {"warmup_fraction", num(&RunConfig::warmup_fraction)},
      {"levels", num(&RunConfig::levels)},
      {"base_channels", num(&RunConfig::base_channels)},
      {"noise_sigma", num(&RunConfig::noise_sigma)},
      {"noise_clip", num(&RunConfig::noise_clip)},
      {"arm", [](RunConfig& c, const std::string&, const std::string& v) { c.arm = parse_arm(v); }},
      {"map_mode",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         try {
           c.map_mode = balclust::parse_map_mode(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError("config key '" + k + "': " + e.what());
         }
       }},
      {"max_points_per_class", num(&RunConfig::max_points_per_class)},
      {"cluster_max_iters", num(&RunConfig::cluster_max_iters)},
      {"split_background", flag(&RunConfig::split_background)},
      {"warm_start", flag(&RunConfig::warm_start)},
      {"consistency_on_labeled", flag(&RunConfig::consistency_on_labeled)},
      {"scs_detached", flag(&RunConfig::scs_detached)},
      {"eval_every", num(&RunConfig::eval_every)},
      {"eval_student", flag(&RunConfig::eval_student)},
      {"metrics_averaging",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         if (v == "micro") {
           c.averaging = metrics::Averaging::micro;
         } else if (v == "macro") {
           c.averaging = metrics::Averaging::macro;
         } else {
           throw ConfigError("config key '" + k + "': expected micro or macro");
         }
       }},
      {"ablation_seeds", num(&RunConfig::ablation_seeds)},
      {"ablation_arms",
       [](RunConfig& c, const std::string& k, const std::string& v) {
         for (char ch : v) {
           if (ch < 'A' || ch > 'E') throw ConfigError("config key '" + k + "': arms must be letters A-E");
         }
         c.ablation_arms = v;
       }},
  };
  return table;
}

}  // namespace

Arm parse_arm(const std::string& text) {
  if (text.size() == 1 && text[0] >= 'A' && text[0] <= 'E') return static_cast<Arm>(text[0] - 'A');
  throw ConfigError("unknown ablation arm '" + text + "' (expected A-E)");
}

char arm_letter(Arm arm) { return static_cast<char>('A' + static_cast<int>(arm)); }

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = setters().find(key);
  if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second(*this, key, value);
}

void RunConfig::validate() const {
  if (height == 0 || width == 0 || height % 4 || width % 4) throw ConfigError("height/width must be multiples of 4");
  if (levels < 2) throw ConfigError("levels must be >= 2");
  const std::size_t mult = std::size_t{1} << (levels - 1);
  if (height % mult || width % mult) throw ConfigError("height/width must be divisible by 2^(levels-1)");
  if (num_classes < 1) throw ConfigError("k must be >= 1");
  if (n == 0 || m == 0 || n_test == 0) throw ConfigError("n, m and n_test must be >= 1");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
  if (total_iters == 0) throw ConfigError("total_iters must be positive");
  if (learning_rate <= 0) throw ConfigError("learning_rate must be positive");
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("ema_decay must lie in [0, 1]");
  if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
  if (noise_sigma < 0 || noise_clip < 0) throw ConfigError("noise_sigma and noise_clip must be >= 0");
  if (ablation_seeds == 0) throw ConfigError("ablation_seeds must be >= 1");
  try {
    loss_weights().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "data_dir = \"" << data_dir.string() << "\"\n"
     << "run_dir = \"" << run_dir.string() << "\"\n"
     << "height = " << height << "\nwidth = " << width << "\nk = " << num_classes << "\n"
     << "n = " << n << "\nm = " << m << "\nn_test = " << n_test << "\n"
     << "data_seed = " << data_seed << "\ninit_seed = " << init_seed << "\ntrain_seed = " << train_seed
     << "\ncluster_seed = " << cluster_seed << "\n"
     << "phase1_iters = " << phase1_iters << "\ntotal_iters = " << total_iters << "\nbatch_size = " << batch_size
     << "\nlearning_rate = " << learning_rate << "\nmomentum = " << momentum << "\nema_decay = " << ema_decay
     << "\ngrad_clip = " << grad_clip << "\n"
     << "alpha = " << alpha << "\nbeta1 = " << beta1 << "\nbeta2 = " << beta2
     << "\nwarmup_fraction = " << warmup_fraction << "\n"
     << "levels = " << levels << "\nbase_channels = " << base_channels << "\n"
     << "noise_sigma = " << noise_sigma << "\nnoise_clip = " << noise_clip << "\n"
     << "arm = " << arm_letter(arm) << "\nmap_mode = " << balclust::to_string(map_mode) << "\n"
     << "max_points_per_class = " << max_points_per_class << "\ncluster_max_iters = " << cluster_max_iters
     << "\nsplit_background = " << (split_background ? "true" : "false") << "\n"
     << "warm_start = " << (warm_start ? "true" : "false")
     << "\nconsistency_on_labeled = " << (consistency_on_labeled ? "true" : "false")
     << "\nscs_detached = " << (scs_detached ? "true" : "false") << "\neval_every = " << eval_every
     << "\neval_student = " << (eval_student ? "true" : "false")
     << "\nmetrics_averaging = " << (averaging == metrics::Averaging::micro ? "micro" : "macro") << "\n"
     << "ablation_seeds = " << ablation_seeds << "\nablation_arms = " << ablation_arms << "\n";
  return os.str();
}

synthdata::SceneSpec RunConfig::scene() const {
  synthdata::SceneSpec s;
  s.height = height;
  s.width = width;
  s.num_classes = num_classes;
  // Classes past the defaults reuse the last disk intensity pattern.
  while (s.class_means.size() < num_classes + 1) s.class_means.push_back(s.class_means[3 + (s.class_means.size() % 2)]);
  s.class_means.resize(num_classes + 1);
  return s;
}

objectives::LossWeights RunConfig::loss_weights() const {
  return objectives::LossWeights{alpha, beta1, beta2, warmup_fraction, total_iters};
}

segnet::ArchSpec RunConfig::arch(std::size_t scs_classes) const {
  return segnet::ArchSpec{levels, base_channels, 1, num_classes + 1, scs_classes};
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), unquote(trim(line.substr(eq + 1))));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::vector<char> bytes;
  try {
    bytes = binio::read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_config(std::string(bytes.begin(), bytes.end()), path.string());
}

}  // namespace bsr::harness
