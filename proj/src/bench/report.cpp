#include "tapt/bench/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>

#include "tapt/errors.hpp"

namespace tapt::bench {

namespace {

int kind_rank(const std::string& k) {
  if (k == "handcrafted") return 0;
  if (k == "apt") return 1;
  if (k == "tapt") return 2;
  return 3;
}

std::string baseline_of(const std::string& k) {
  if (k == "apt") return "handcrafted";
  if (k == "tapt") return "apt";
  return {};
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", v);
  return buf;
}

std::string signed_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%+.1f", v);
  return buf;
}

}  // namespace

std::vector<ReportGrid> build_report(const std::vector<EvalRecord>& records) {
  std::vector<std::string> attacks, designs;
  std::map<std::string, const EvalRecord*> attack_info;
  for (const EvalRecord& r : records) {
    if (!attack_info.count(r.attack)) {
      attacks.push_back(r.attack);
      attack_info[r.attack] = &r;
    }
    if (r.design != "none" && std::find(designs.begin(), designs.end(), r.design) == designs.end())
      designs.push_back(r.design);
  }
  if (designs.empty()) designs.push_back("none");

  std::vector<ReportGrid> grids;
  for (const std::string& a : attacks)
    for (const std::string& design : designs) {
      std::vector<const EvalRecord*> members;
      for (const EvalRecord& r : records)
        if (r.attack == a && (r.design == design || r.design == "none")) members.push_back(&r);
      if (members.empty()) continue;
      ReportGrid g;
      g.attack = a;
      g.attack_family = attack_info[a]->attack_family;
      g.epsilon = attack_info[a]->epsilon;
      g.design = design;
      for (const EvalRecord* r : members)
        if (std::find(g.datasets.begin(), g.datasets.end(), r->dataset_id) == g.datasets.end())
          g.datasets.push_back(r->dataset_id);

      std::map<std::string, ReportRow> rows;
      for (const EvalRecord* r : members) {
        if (r->epsilon != g.epsilon) throw ReportError("attack " + a + " recorded with two budgets");
        ReportRow& row = rows[r->defense_kind];
        if (row.defense_kind.empty()) {
          row.defense_kind = r->defense_kind;
          row.defense = r->defense;
          row.robust.assign(g.datasets.size(), std::nullopt);
          row.clean.assign(g.datasets.size(), std::nullopt);
        } else if (row.defense != r->defense) {
          throw ReportError("grid " + g.attack_family + "/" + design + " mixes " + r->defense_kind +
                            " configs " + row.defense.substr(0, 12) + " and " + r->defense.substr(0, 12));
        }
        const std::size_t col = static_cast<std::size_t>(
            std::find(g.datasets.begin(), g.datasets.end(), r->dataset_id) - g.datasets.begin());
        if (row.robust[col]) throw ReportError("two records for " + r->defense_kind + " on " + r->dataset_id);
        row.robust[col] = r->robust_accuracy;
        row.clean[col] = r->clean_accuracy;
      }
      for (auto& [kind, row] : rows) {
        std::size_t n = 0;
        for (std::size_t c = 0; c < g.datasets.size(); ++c)
          if (row.robust[c]) {
            row.robust_average += *row.robust[c];
            row.clean_average += *row.clean[c];
            ++n;
          }
        row.robust_average /= static_cast<double>(n);
        row.clean_average /= static_cast<double>(n);
        g.rows.push_back(row);
      }
      std::sort(g.rows.begin(), g.rows.end(),
                [](const ReportRow& x, const ReportRow& y) { return kind_rank(x.defense_kind) < kind_rank(y.defense_kind); });
      for (ReportRow& row : g.rows) {
        const std::string base = baseline_of(row.defense_kind);
        for (const ReportRow& other : g.rows)
          if (!base.empty() && other.defense_kind == base) row.delta = row.robust_average - other.robust_average;
      }
      grids.push_back(std::move(g));
    }
  return grids;
}

std::string render_text(const std::vector<ReportGrid>& grids) {
  std::ostringstream out;
  for (const ReportGrid& g : grids) {
    out << g.attack_family << " eps=" << num(g.epsilon * 255.0) << "/255  design=" << g.design << "  ["
        << g.attack.substr(0, 12) << "]\n";
    for (const char* metric : {"robust", "clean"}) {
      const bool robust = std::string(metric) == "robust";
      char head[64];
      std::snprintf(head, sizeof head, "  %-12s", metric);
      out << head;
      for (const std::string& d : g.datasets) {
        std::snprintf(head, sizeof head, " %10s", d.c_str());
        out << head;
      }
      out << "    average" << (robust ? "      delta" : "") << '\n';
      for (const ReportRow& row : g.rows) {
        std::snprintf(head, sizeof head, "  %-12s", row.defense_kind.c_str());
        out << head;
        const auto& vals = robust ? row.robust : row.clean;
        for (const auto& v : vals) {
          std::snprintf(head, sizeof head, " %10s", v ? num(*v).c_str() : "-");
          out << head;
        }
        std::snprintf(head, sizeof head, " %10s", num(robust ? row.robust_average : row.clean_average).c_str());
        out << head;
        if (robust) {
          std::snprintf(head, sizeof head, " %10s", row.delta ? signed_num(*row.delta).c_str() : "");
          out << head;
        }
        out << '\n';
      }
    }
    out << '\n';
  }
  return out.str();
}

std::string render_csv(const std::vector<ReportGrid>& grids) {
  std::ostringstream out;
  out.precision(17);
  out << "attack_family,epsilon,design,defense_kind,dataset,robust_accuracy,clean_accuracy,delta\n";
  char buf[128];
  for (const ReportGrid& g : grids)
    for (const ReportRow& row : g.rows) {
      for (std::size_t c = 0; c < g.datasets.size(); ++c) {
        if (!row.robust[c]) continue;
        std::snprintf(buf, sizeof buf, "%.17g,%.17g", *row.robust[c], *row.clean[c]);
        out << g.attack_family << ',' << g.epsilon << ',' << g.design << ',' << row.defense_kind << ','
            << g.datasets[c] << ',' << buf << ",\n";
      }
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,", row.robust_average, row.clean_average);
      out << g.attack_family << ',' << g.epsilon << ',' << g.design << ',' << row.defense_kind << ",average," << buf;
      if (row.delta) out << signed_num(*row.delta);
      out << '\n';
    }
  return out.str();
}

}  // namespace tapt::bench
