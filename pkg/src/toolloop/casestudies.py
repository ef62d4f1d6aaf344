"""Scripted rollouts demonstrating the four canonical tool-use behaviours:
decomposing a computation across calls, correcting a wrong program after
seeing its output, verifying algebra symbolically, and backtracking from a
failing solver to enumeration.

Each case fixes the problem, the exact model turns, and what the tool
payloads and final answer must be.  The turns drive a
:class:`~toolloop.inference.ScriptedBackend`, so replays are deterministic
end to end and double as integration fixtures for the whole loop.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .defaults import PYTHON_EXECUTOR_TOOL
from .inference import ScriptedBackend
from .protocol import CALL_CLOSE, CALL_OPEN


def code_call(code: str) -> str:
    """Render a python_code_executor call turn fragment."""
    body = json.dumps({"name": PYTHON_EXECUTOR_TOOL, "arguments": {"code": code}})
    return f"{CALL_OPEN}{body}{CALL_CLOSE}"


@dataclass(frozen=True)
class CaseStudy:
    name: str
    problem_id: str
    problem: str
    turns: tuple[str, ...]
    # Per tool call, substrings the response payload must contain.
    expected_payload_parts: tuple[tuple[str, ...], ...]
    expected_answer: int


_DECOMPOSITION = CaseStudy(
    name="decomposition",
    problem_id="lottery-conditional",
    problem=(
        "Jen enters a lottery by picking 4 distinct numbers from "
        "S = {1, 2, ..., 10}. Four numbers are then chosen from S at random. "
        "She wins a prize if at least two of her numbers are among the chosen "
        "ones, and wins the grand prize if all four are. Given that she won a "
        "prize, the probability that she won the grand prize is m/n with m "
        "and n relatively prime positive integers. Find m + n."
    ),
    turns=(
        "I will split the computation: first the total number of possible "
        "draws of 4 numbers out of 10.\n"
        + code_call(
            "from math import comb\n\nC_10_4 = comb(10, 4)\nprint(C_10_4)\n"
        ),
        "There are 210 possible draws. Next I count the draws sharing "
        "exactly 2, exactly 3, and all 4 numbers with Jen's pick, and their "
        "total.\n"
        + code_call(
            "from math import comb\n\n"
            "ways_2_common = comb(4, 2) * comb(6, 2)\n"
            "ways_3_common = comb(4, 3) * comb(6, 1)\n"
            "ways_4_common = comb(4, 4)\n"
            "favorable = ways_2_common + ways_3_common + ways_4_common\n"
            "print(favorable, ways_2_common, ways_3_common, ways_4_common)\n"
        ),
        "So P(prize) = 115/210 and P(grand prize) = 1/210, making the "
        "conditional probability (1/210)/(115/210) = 1/115. Hence m = 1, "
        "n = 115 and m + n = 116. The final answer is \\boxed{116}.",
    ),
    expected_payload_parts=(("210",), ("115", "90", "24", "1")),
    expected_answer=116,
)

_CORRECTION = CaseStudy(
    name="correction",
    problem_id="digit-change-divisible",
    problem=(
        "Let N be the greatest four-digit positive integer with the property "
        "that whenever one of its digits is changed to 1, the resulting "
        "number is divisible by 7. Let Q and R be the quotient and remainder "
        "when N is divided by 1000. Find Q + R."
    ),
    turns=(
        "I will search digits from the top down, encoding the four "
        "divisibility conditions as congruences on the digits.\n"
        + code_call(
            "def find_largest_N():\n"
            "    for a in range(9, -1, -1):\n"
            "        for b in range(9, -1, -1):\n"
            "            for c in range(9, -1, -1):\n"
            "                for d in range(9, -1, -1):\n"
            "                    if (6 * a + 2 * b + 3 * c + d + 1) % 7 == 0 and \\\n"
            "                       (6 * a + 2 * b + 3 * c + d + 2) % 7 == 0 and \\\n"
            "                       (6 * a + 2 * b + 3 * c + d + 3) % 7 == 0 and \\\n"
            "                       (6 * a + 2 * b + 3 * c + d + 6) % 7 == 0:\n"
            "                        return 1000 * a + 100 * b + 10 * c + d\n"
            "    return None\n"
            "\n"
            "print(find_largest_N())\n"
        ),
        "The search returned None, so my congruence encoding was wrong — the "
        "four conditions as I wrote them are contradictory. I should test "
        "the four modified numbers directly instead of juggling residues.\n"
        + code_call(
            "def find_largest_N():\n"
            "    for a in range(9, -1, -1):\n"
            "        for b in range(9, -1, -1):\n"
            "            for c in range(9, -1, -1):\n"
            "                for d in range(9, -1, -1):\n"
            "                    if (1000 + 100 * b + 10 * c + d) % 7 == 0 and \\\n"
            "                       (1000 * a + 100 + 10 * c + d) % 7 == 0 and \\\n"
            "                       (1000 * a + 100 * b + 10 + d) % 7 == 0 and \\\n"
            "                       (1000 * a + 100 * b + 10 * c + 1) % 7 == 0:\n"
            "                        return 1000 * a + 100 * b + 10 * c + d\n"
            "    return None\n"
            "\n"
            "print(find_largest_N())\n"
        ),
        "N = 5694 satisfies all four conditions. Now Q + R for N divided by "
        "1000.\n"
        + code_call("N = 5694\nQ = N // 1000\nR = N % 1000\nprint(Q + R)\n"),
        "Q = 5 and R = 694, so Q + R = 699. The final answer is \\boxed{699}.",
    ),
    expected_payload_parts=(("None",), ("5694",), ("699",)),
    expected_answer=699,
)

_VERIFICATION = CaseStudy(
    name="verification",
    problem_id="log-product",
    problem=(
        "There exist real numbers x and y, both greater than 1, such that "
        "log_x(y^x) = log_y(x^(4y)) = 10. Find xy."
    ),
    turns=(
        "Let a = log_x(y). The two conditions become x*a = 10 and 4y/a = 10; "
        "then xy should come out independent of a. I will verify this "
        "symbolically.\n"
        + code_call(
            "from sympy import symbols, Eq, solve\n"
            "\n"
            "x, y, a = symbols('x y a', positive=True)\n"
            "eq1 = Eq(x * a, 10)\n"
            "eq2 = Eq(4 * y / a, 10)\n"
            "sol = solve((eq1, eq2), (x, y))\n"
            "xy = sol[x] * sol[y]\n"
            "print(xy.simplify())\n"
        ),
        "The product simplifies to exactly 25 with the parameter a "
        "cancelling, which confirms the algebra. The final answer is "
        "\\boxed{25}.",
    ),
    expected_payload_parts=(("25",),),
    expected_answer=25,
)

_BACKTRACKING = CaseStudy(
    name="backtracking",
    problem_id="triple-sum-count",
    problem=(
        "Find the number of triples (a, b, c) of nonnegative integers "
        "satisfying a + b + c = 300 and a^2*b + a^2*c + b^2*a + b^2*c + "
        "c^2*a + c^2*b = 6,000,000."
    ),
    turns=(
        "First attempt: solve the system symbolically and count the "
        "nonnegative integer solutions of the parametric family.\n"
        + code_call(
            "from sympy import symbols, Eq, solve\n"
            "\n"
            "a, b, c = symbols('a b c', integer=True, nonnegative=True)\n"
            "eq1 = Eq(a + b + c, 300)\n"
            "solutions = solve([eq1], (a, b, c), dict=True)\n"
            "count = 0\n"
            "for sol in solutions:\n"
            "    if all(val.is_integer and val >= 0 for val in sol.values()):\n"
            "        count += 1\n"
            "print(count)\n"
        ),
        "The symbolic route fails: the solution is parametric and sympy "
        "cannot decide the sign of a symbolic expression, hence the "
        "TypeError. Backtrack to direct enumeration — with c = 300 - a - b "
        "it is only ~45000 candidate pairs.\n"
        + code_call(
            "count = 0\n"
            "for a in range(301):\n"
            "    for b in range(301 - a):\n"
            "        c = 300 - a - b\n"
            "        s = a * a * b + a * a * c + b * b * a + b * b * c + c * c * a + c * c * b\n"
            "        if s == 6000000:\n"
            "            count += 1\n"
            "print(count)\n"
        ),
        "The enumeration finds 601 triples. The final answer is \\boxed{601}.",
    ),
    expected_payload_parts=(("TypeError",), ("601",)),
    expected_answer=601,
)

CASE_STUDIES: tuple[CaseStudy, ...] = (
    _DECOMPOSITION,
    _CORRECTION,
    _VERIFICATION,
    _BACKTRACKING,
)

CASE_STUDY_BY_NAME = {case.name: case for case in CASE_STUDIES}


def scripted_backend() -> ScriptedBackend:
    """Backend scripting all four case studies, keyed by problem text."""
    return ScriptedBackend(turns={case.problem: case.turns for case in CASE_STUDIES})
