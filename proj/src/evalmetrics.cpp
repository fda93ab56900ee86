#include "flss/evalmetrics.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <ostream>
#include <istream>
#include <sstream>

#include "flss/errors.hpp"

namespace flss {

namespace {

using AttackTable = std::map<std::string, std::map<std::int64_t, const PredictionRecord*>>;

struct Indexed {
  AttackTable table;
  SampleSet universe;
};

Indexed index_records(std::span<const PredictionRecord> records) {
  Indexed idx;
  for (const auto& r : records) {
    auto [it, inserted] = idx.table[r.attack_id].emplace(r.sample_id, &r);
    if (!inserted) {
      throw FormatError("duplicate record for sample " + std::to_string(r.sample_id) + " under attack '" +
                        r.attack_id + "'");
    }
    idx.universe.insert(r.sample_id);
  }
  for (const auto& [attack, rows] : idx.table) {
    if (rows.size() != idx.universe.size()) {
      for (std::int64_t id : idx.universe) {
        if (!rows.contains(id)) {
          throw FormatError("incomplete log: sample " + std::to_string(id) + " missing under attack '" + attack + "'");
        }
      }
    }
  }
  return idx;
}

double percent(std::size_t count, std::size_t total) {
  return total == 0 ? 0.0 : 100.0 * static_cast<double>(count) / static_cast<double>(total);
}

EnsembleSets sets_from(const Indexed& idx, bool ignore_rejection) {
  EnsembleSets s;
  for (std::int64_t id : idx.universe) {
    bool all_correct = true;
    bool any_wrong = false;
    bool any_rejected = false;
    for (const auto& [attack, rows] : idx.table) {
      const PredictionRecord& r = *rows.at(id);
      const bool accepted = ignore_rejection || r.accepted;
      if (!accepted) {
        any_rejected = true;
        all_correct = false;
      } else if (!r.correct()) {
        any_wrong = true;
        all_correct = false;
      }
    }
    if (all_correct) s.fully_correct.insert(id);
    if (any_wrong) s.falsely_wrong.insert(id);
    if (any_rejected) s.rejected.insert(id);
  }
  return s;
}

std::optional<double> ns_accuracy(const Indexed& ns, const SampleSet& universe, bool clean_only) {
  if (ns.universe != universe) throw FormatError("NS records cover different samples than the smoothed records");
  std::size_t correct = 0;
  for (std::int64_t id : universe) {
    bool ok = true;
    for (const auto& [attack, rows] : ns.table) {
      if (clean_only && attack != kCleanAttack) continue;
      if (!rows.at(id)->correct()) ok = false;
    }
    if (ok) ++correct;
  }
  return percent(correct, universe.size());
}

}  // namespace

EnsembleSets build_sets(std::span<const PredictionRecord> records) {
  return sets_from(index_records(records), false);
}

std::optional<double> accepted_accuracy(std::size_t fully_correct, std::size_t falsely_wrong) {
  if (fully_correct + falsely_wrong == 0) return std::nullopt;
  return 100.0 * static_cast<double>(fully_correct) / static_cast<double>(fully_correct + falsely_wrong);
}

EvalReport compute_report(std::span<const PredictionRecord> records, std::span<const PredictionRecord> ns_records) {
  const Indexed idx = index_records(records);
  EvalReport rep;
  rep.universe_size = idx.universe.size();
  for (const auto& [attack, rows] : idx.table) rep.attacks.push_back(attack);

  rep.sets = sets_from(idx, false);
  const std::size_t n = rep.universe_size;
  rep.fc = percent(rep.sets.fully_correct.size(), n);
  rep.fw = percent(rep.sets.falsely_wrong.size(), n);
  rep.mpr = percent(rep.sets.rejected.size(), n);
  if (n > 0) {
    rep.acc_adv_10 = accepted_accuracy(rep.sets.fully_correct.size(), rep.sets.falsely_wrong.size());
    rep.acc_adv_0 = percent(sets_from(idx, true).fully_correct.size(), n);
  }

  for (const auto& [attack, rows] : idx.table) {
    std::size_t acc_correct = 0, acc_wrong = 0, rejected = 0, correct = 0;
    for (const auto& [id, r] : rows) {
      if (r->correct()) ++correct;
      if (!r->accepted) ++rejected;
      else if (r->correct()) ++acc_correct;
      else ++acc_wrong;
    }
    AttackRow row;
    row.attack_id = attack;
    row.accepted_correct = percent(acc_correct, n);
    row.accepted_wrong = percent(acc_wrong, n);
    row.rejected = percent(rejected, n);
    row.accuracy_all = percent(correct, n);
    row.accuracy_accepted = accepted_accuracy(acc_correct, acc_wrong);
    rep.per_attack.push_back(row);
    if (attack == kCleanAttack) {
      rep.acc_nat_0 = row.accuracy_all;
      rep.acc_nat_10 = row.accuracy_accepted;
    }
  }

  if (!ns_records.empty()) {
    const Indexed ns = index_records(ns_records);
    rep.acc_adv_ns = ns_accuracy(ns, idx.universe, false);
    if (ns.table.contains(std::string(kCleanAttack))) rep.acc_nat_ns = ns_accuracy(ns, idx.universe, true);
  }
  return rep;
}

nlohmann::ordered_json report_to_json(const EvalReport& report) {
  auto opt = [](const std::optional<double>& v) -> nlohmann::ordered_json {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
  };
  auto ids = [](const SampleSet& s) { return nlohmann::ordered_json(std::vector<std::int64_t>(s.begin(), s.end())); };

  nlohmann::ordered_json j;
  j["attacks"] = report.attacks;
  j["universe_size"] = report.universe_size;
  j["FC"] = report.fc;
  j["FW"] = report.fw;
  j["MPR"] = report.mpr;
  j["Acc_nat_NS"] = opt(report.acc_nat_ns);
  j["Acc_nat_0"] = opt(report.acc_nat_0);
  j["Acc_nat_10"] = opt(report.acc_nat_10);
  j["Acc_adv_NS"] = opt(report.acc_adv_ns);
  j["Acc_adv_0"] = opt(report.acc_adv_0);
  j["Acc_adv_10"] = opt(report.acc_adv_10);
  j["S_FC"] = ids(report.sets.fully_correct);
  j["S_FW"] = ids(report.sets.falsely_wrong);
  j["R"] = ids(report.sets.rejected);
  auto& table = j["per_attack"] = nlohmann::ordered_json::array();
  for (const auto& row : report.per_attack) {
    table.push_back({{"attack_id", row.attack_id},
                     {"accepted_correct", row.accepted_correct},
                     {"accepted_wrong", row.accepted_wrong},
                     {"rejected", row.rejected},
                     {"accuracy_all", row.accuracy_all},
                     {"accuracy_accepted", opt(row.accuracy_accepted)}});
  }
  return j;
}

void write_prediction_log(std::ostream& out, std::span<const PredictionRecord> records) {
  out << kPredictionLogHeader << '\n';
  for (const auto& r : records) {
    if (r.attack_id.find_first_of(",\n\r") != std::string::npos) {
      throw FormatError("attack id contains a separator: " + r.attack_id);
    }
    out << r.sample_id << ',' << r.attack_id << ',' << r.true_label << ',' << r.predicted << ','
        << (r.accepted ? 1 : 0) << ',' << r.vote_count << '\n';
  }
}

namespace {

template <typename T>
T parse_field(std::string_view text, std::size_t line, const char* name) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw FormatError("line " + std::to_string(line) + ": bad " + name + " '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

std::vector<PredictionRecord> read_prediction_log(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("line 1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kPredictionLogHeader) throw FormatError("line 1: header mismatch: '" + line + "'");

  std::vector<PredictionRecord> out;
  std::map<std::pair<std::string, std::int64_t>, std::size_t> seen;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    for (;;) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (fields.size() != 6) {
      throw FormatError("line " + std::to_string(lineno) + ": expected 6 fields, got " + std::to_string(fields.size()));
    }
    PredictionRecord r;
    r.sample_id = parse_field<std::int64_t>(fields[0], lineno, "sample_id");
    if (fields[1].empty()) throw FormatError("line " + std::to_string(lineno) + ": empty attack_id");
    r.attack_id = std::string(fields[1]);
    r.true_label = parse_field<int>(fields[2], lineno, "true_label");
    r.predicted = parse_field<int>(fields[3], lineno, "predicted");
    const int accepted = parse_field<int>(fields[4], lineno, "accepted");
    if (accepted != 0 && accepted != 1) throw FormatError("line " + std::to_string(lineno) + ": accepted must be 0 or 1");
    r.accepted = accepted == 1;
    r.vote_count = parse_field<int>(fields[5], lineno, "vote_count");
    if (r.true_label < 0 || r.predicted < 0 || r.vote_count < 0) {
      throw FormatError("line " + std::to_string(lineno) + ": negative label or count");
    }
    auto [it, inserted] = seen.emplace(std::make_pair(r.attack_id, r.sample_id), lineno);
    if (!inserted) {
      throw FormatError("line " + std::to_string(lineno) + ": duplicate (sample, attack) pair, first seen on line " +
                        std::to_string(it->second));
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<PredictionRecord> ingest_external_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open prediction log: " + path);
  return read_prediction_log(in);
}

}  // namespace flss
