"""Standard prompts, tool schemas, and shipped configuration.

The system prompt and the two tool schemas below are the exact texts the
runtime presents to the model; downstream behaviour (which tool the model
reaches for, when it consults documentation) is sensitive to their wording,
so they are frozen here rather than assembled ad hoc.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .protocol import ToolArg, ToolSchema

# Packages importable inside the code-execution tool and queryable through
# the documentation-retrieval tool.
ALLOWED_PACKAGES: tuple[str, ...] = (
    "sympy",
    "scipy",
    "numpy",
    "math",
    "cmath",
    "fractions",
    "itertools",
)

SYSTEM_PROMPT = (
    "You should solve the given math problem step by step.\n"
    "There are some tools that you can use to help you solve the math problem.\n"
    "Examine the available tools and determine which ones might relevant and "
    "useful for addressing the query. Make sure to consider the tool metadata "
    "for each tool.\n"
    "Based on your thorough analysis, decide if your memory is complete and "
    "accurate enough to generate the final output, or if additional tool usage "
    "is necessary.\n"
    "Please reason step by step, and put your final answer within \\boxed{}."
)

PYTHON_EXECUTOR_TOOL = "python_code_executor"
RETRIEVER_TOOL = "rag_system_retrieve"

PYTHON_EXECUTOR_SCHEMA = ToolSchema(
    name=PYTHON_EXECUTOR_TOOL,
    description=(
        "A tool to execute python code. You need to use print() to get the "
        "result of the code execution. If you are not familiar with the "
        "package (sympy, scipy, numpy, math, cmath, fractions, itertools) you "
        "are using, you can call `rag_system_retrieve` tool before calling "
        "`python_code_executor` tool."
    ),
    args=(ToolArg(name="code", type="text", required=True, description="code text"),),
    returns="The result of the code execution.",
    limitations=(
        "Do not perform plotting operations, such as using matplotlib.",
        "If you want to use external packages, you can only use sympy, scipy, "
        "numpy, math, cmath, fractions, and itertools.",
        "Not applicable to geometry and number theory problems.",
        "No access to any system resources, file operations, or network requests.",
        "All calculations must be self-contained within a single function or script.",
        "Input must be provided directly in the query string.",
        "Output is limited to numerical results or simple lists/tuples of numbers.",
    ),
    best_practices=(
        "Provide clear and specific queries that describe the desired "
        "mathematical calculation.",
        "Include all necessary numerical inputs directly in the query string.",
        "Ensure all required numerical data is included in the query.",
    ),
)

RETRIEVER_SCHEMA = ToolSchema(
    name=RETRIEVER_TOOL,
    description="A search tool system for querying Python package documentation.",
    args=(
        ToolArg(
            name="repo_name",
            type="text",
            required=True,
            description="One of [sympy, scipy, numpy, math, cmath, fractions, itertools]",
        ),
        ToolArg(
            name="query",
            type="text",
            required=True,
            description=(
                "Natural-language query for retrieval, e.g., 'Function "
                "interface and examples of calling sympy to solve nonlinear "
                "equations'"
            ),
        ),
        ToolArg(
            name="top_k",
            type="integer",
            required=False,
            default=3,
            description="Number of documents to return per sub-query (default: 3)",
        ),
    ),
    returns=(
        "str: The query result, including relevant code examples, "
        "descriptions, and usage."
    ),
    limitations=("Not suitable for solving specific math problems.",),
    best_practices=(
        "Ask for usage instructions or examples for a specific function "
        "interface whenever possible.",
    ),
)

STANDARD_SCHEMAS: dict[str, ToolSchema] = {
    PYTHON_EXECUTOR_TOOL: PYTHON_EXECUTOR_SCHEMA,
    RETRIEVER_TOOL: RETRIEVER_SCHEMA,
}


def default_config_paths() -> tuple[Path, Path]:
    """Paths of the shipped server and tool configuration files."""
    data = resources.files("toolloop") / "data"
    return Path(str(data / "servers.json")), Path(str(data / "tools.json"))
