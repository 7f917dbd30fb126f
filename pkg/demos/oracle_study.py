"""Finite-difference half on its own: exact values on the band frontier.

Runs a refinement study for the 2D degenerate circle problem with the exact
solution standing in for the trained networks, and prints the order table.

    python3 demos/oracle_study.py
"""
from defuse.harness import convergence_study, table_markdown
from defuse.problems import get_problem

if __name__ == "__main__":
    problem = get_problem("ex4_3", tau_minus=1e10, tau_plus=1.0)
    table = convergence_study(problem, [20, 40, 80, 160], oracle=True, echo=print)
    print()
    print(table_markdown(table))
