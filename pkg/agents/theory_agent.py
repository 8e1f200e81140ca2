from agents.base_agent import BLACK_ON_GREEN, RESET, WHITE_ON_BLUE, WHITE_ON_RED, Agent
from logger import logger
from reports import emit_theory_table, format_theory_table
from theory_oracle import run_theory_suites


class TheoryAgent(Agent):
    """Exact-enumeration checks of the bound identities and orderings; fails the run on any violation."""

    def execute(self) -> int:
        theory = self.context.config.theory
        logger.info(f"{WHITE_ON_BLUE}Verifying theory on {theory.n_models} random models "
                    f"(|X|={theory.x_size}, |Z|={theory.z_size}, seed {self.context.seed}){RESET}")
        rows = run_theory_suites(theory, self.context.seed)
        logger.info("\n" + format_theory_table(rows))
        self.artifact_written(emit_theory_table(rows, self.context.output_dir / "theory.txt"))
        for row in rows:
            self.publish(row)
            self.record_metric(f"{row.suite}.max_residual", row.max_residual)
            self.record_metric(f"{row.suite}.violations", row.violations)
        self.write_metrics()

        failed = [row.suite for row in rows if not row.passed]
        if failed:
            logger.error(f"{WHITE_ON_RED}Theory suites failed: {', '.join(failed)}{RESET}")
            return 1
        logger.info(f"{BLACK_ON_GREEN}All {len(rows)} theory suites passed.{RESET}")
        return 0
