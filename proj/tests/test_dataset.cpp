#include <catch2/catch_amalgamated.hpp>

#include "targetkit/dataset.hpp"
#include "test_helpers.hpp"

using namespace targetkit;
using testutil::write_temp_file;

namespace {

Schema two_arm_schema() {
  return Schema::from_json(nlohmann::json::parse(R"({
    "columns": {"grp": "arm", "y": "outcome", "x1": "covariate:numeric"},
    "arms": ["c", "t"],
    "control": "c",
    "outcome_binary": true
  })"));
}

}  // namespace

TEST_CASE("ingest parses a small two-arm file") {
  const auto path = write_temp_file("basic",
                                    "grp,y,x1\n"
                                    "t,1,0.5\n"
                                    "c,0,1.5\n"
                                    "t,0,2.5\n");
  const auto res = ingest_csv(path, two_arm_schema());
  REQUIRE(res.table.n_rows() == 3);
  REQUIRE(res.table.n_covariates() == 1);
  REQUIRE(res.report.rows_dropped == 0);
  CHECK(res.table.arm == std::vector<int>{1, 0, 1});
  CHECK(res.table.outcome == std::vector<double>{1.0, 0.0, 0.0});
  CHECK(res.table.covariate_kinds[0] == ColumnKind::numeric);
}

TEST_CASE("row with a missing outcome is dropped and reported") {
  const auto path = write_temp_file("missing",
                                    "grp,y,x1\n"
                                    "t,1,0.5\n"
                                    "c,,1.5\n"
                                    "c,0,2.5\n");
  const auto res = ingest_csv(path, two_arm_schema());
  REQUIRE(res.table.n_rows() == 2);
  REQUIRE(res.report.rows_dropped == 1);
  REQUIRE_FALSE(res.report.notes.empty());
  CHECK(res.report.notes[0].find("1 row dropped") != std::string::npos);
}

TEST_CASE("categorical covariates one-hot encode in lexicographic level order") {
  const auto path = write_temp_file("cat",
                                    "grp,y,city\n"
                                    "t,1,B\n"
                                    "c,0,A\n"
                                    "t,0,C\n"
                                    "c,1,A\n");
  const auto schema = Schema::from_json(nlohmann::json::parse(R"({
    "columns": {"grp": "arm", "y": "outcome", "city": "covariate:categorical"},
    "arms": ["c", "t"], "control": "c"
  })"));
  const auto res = ingest_csv(path, schema);
  REQUIRE(res.table.covariate_names ==
          std::vector<std::string>{"city=A", "city=B", "city=C"});
  CHECK(res.table.covariates(0, 1) == 1.0);  // row 0 is city B
  CHECK(res.table.covariates(1, 0) == 1.0);
  CHECK(res.table.covariates(2, 2) == 1.0);
  CHECK(res.table.covariate_kinds[0] == ColumnKind::categorical_encoded);
}

TEST_CASE("schema errors: missing column, unknown arm, unparseable cell") {
  const auto missing_col = write_temp_file("err1", "grp,y\nt,1\nc,0\n");
  CHECK_THROWS_AS(ingest_csv(missing_col, two_arm_schema()), config_error);

  const auto bad_arm = write_temp_file("err2", "grp,y,x1\nz,1,0.5\nc,0,1.0\n");
  CHECK_THROWS_AS(ingest_csv(bad_arm, two_arm_schema()), config_error);

  const auto bad_cell = write_temp_file("err3", "grp,y,x1\nt,1,0.5\nc,zebra,1.0\n");
  try {
    ingest_csv(bad_cell, two_arm_schema());
    FAIL("expected config_error");
  } catch (const config_error& e) {
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
}

TEST_CASE("pair ids: same-arm duplicates rejected, singletons flagged") {
  const auto schema = Schema::from_json(nlohmann::json::parse(R"({
    "columns": {"grp": "arm", "y": "outcome", "p": "pair_id"},
    "arms": ["c", "t"], "control": "c"
  })"));
  const auto dup = write_temp_file("pair1",
                                   "grp,y,p\n"
                                   "t,1,7\n"
                                   "t,0,7\n"
                                   "c,0,8\n");
  CHECK_THROWS_AS(ingest_csv(dup, schema), config_error);

  const auto single = write_temp_file("pair2",
                                      "grp,y,p\n"
                                      "t,1,1\n"
                                      "c,0,1\n"
                                      "t,0,2\n"
                                      "c,1,\n");
  const auto res = ingest_csv(single, schema);
  REQUIRE(res.table.n_rows() == 4);
  REQUIRE(res.report.incomplete_pairs == std::vector<long>{2});
  CHECK(res.table.pair_id[3] == -1);
}

TEST_CASE("split_by_arm returns per-arm index sets") {
  auto t = testutil::make_binary_experiment(152, 64, 147, 43);
  REQUIRE(split_by_arm(t, "treated").size() == 152);
  REQUIRE(split_by_arm(t, "control").size() == 147);
  CHECK(split_by_arm(t, "treated").size() + split_by_arm(t, "control").size() ==
        t.n_rows());
  CHECK_THROWS_AS(split_by_arm(t, "nope"), domain_error);

  // Declared-but-unused arm yields the empty set.
  auto t3 = testutil::make_table({"c", "t", "u"}, 0, {0, 1, 0, 1}, {0, 1, 0, 1});
  CHECK(split_by_arm(t3, "u").empty());

  // Degenerate single-arm table: split still covers every row.
  auto t1 = testutil::make_table({"c", "t"}, 0, {1, 1, 1}, {0, 1, 0});
  CHECK(split_by_arm(t1, "t").size() == 3);
}

TEST_CASE("write + re-ingest round-trips a table bitwise") {
  Rng rng(20240817);
  std::vector<int> arm;
  std::vector<double> outcome;
  std::vector<double> x1, x2;
  for (int i = 0; i < 60; ++i) {
    arm.push_back(int(rng.below(2)));
    outcome.push_back(rng.normal());
    x1.push_back(rng.uniform() < 0.5 ? 0.0 : 1.0);
    x2.push_back(rng.normal(0.0, 1e-8) + 1.0 / 3.0);
  }
  arm[0] = 0;
  arm[1] = 1;
  auto t = testutil::make_table({"c", "t"}, 0, arm, outcome, {{"x1", x1}, {"x2", x2}});
  t.pair_id.assign(60, -1);
  t.pair_id[0] = 5;
  t.pair_id[1] = 5;

  const auto path = write_temp_file("roundtrip", "");
  write_csv(t, path);
  const auto res = ingest_csv(path, derived_schema(t));
  REQUIRE(res.table.n_rows() == t.n_rows());
  CHECK(res.table.covariates == t.covariates);
  CHECK(res.table.outcome == t.outcome);
  CHECK(res.table.arm == t.arm);
  CHECK(res.table.pair_id == t.pair_id);
  CHECK(res.table.covariate_names == t.covariate_names);
}

TEST_CASE("ingestion is deterministic across repeated runs") {
  const auto path = write_temp_file("det",
                                    "grp,y,city,x1\n"
                                    "t,1,B,0.25\n"
                                    "c,0,A,0.75\n"
                                    "t,0,C,0.5\n");
  const auto schema = Schema::from_json(nlohmann::json::parse(R"({
    "columns": {"grp": "arm", "y": "outcome",
                "city": "covariate:categorical", "x1": "covariate:numeric"},
    "arms": ["c", "t"], "control": "c"
  })"));
  const auto a = ingest_csv(path, schema);
  const auto b = ingest_csv(path, schema);
  CHECK(a.table.covariates == b.table.covariates);
  CHECK(a.table.covariate_names == b.table.covariate_names);
  CHECK(a.table.arm == b.table.arm);
}

TEST_CASE("table validation enforces the declared invariants") {
  auto ok = testutil::make_binary_experiment(5, 2, 5, 1);
  CHECK_NOTHROW(ok.validate());

  auto one_arm = testutil::make_table({"c", "t"}, 0, {1, 1}, {0, 1});
  CHECK_THROWS_AS(one_arm.validate(), config_error);

  auto bad_binary = testutil::make_binary_experiment(5, 2, 5, 1);
  bad_binary.outcome[0] = 0.5;
  CHECK_THROWS_AS(bad_binary.validate(), config_error);

  auto nonfinite = testutil::make_binary_experiment(5, 2, 5, 1);
  nonfinite.outcome_binary = false;
  nonfinite.outcome[2] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(nonfinite.validate(), config_error);
}
