"""Compute server: rule-based repair, guest execution, error classification."""

from __future__ import annotations

import json

import pytest

from conftest import GUEST_CASES
from toolloop.compute import (
    ADVICE_TEMPLATES,
    ComputeServerError,
    ErrorClass,
    ExecutionLimits,
    GuestCode,
    RUNNER_SENTINEL,
    advice_for,
    classify_error,
    execute,
    handle_compute_call,
    parse_runner_record,
    rule_fix,
)
from toolloop.defaults import PYTHON_EXECUTOR_TOOL, RETRIEVER_TOOL
from toolloop.protocol import ToolCall


def load_case(name: str) -> str:
    return (GUEST_CASES / name).read_text(encoding="utf-8")


# --- rule_fix ----------------------------------------------------------------


def test_rule_fix_is_identity_on_valid_code():
    source = "import math\n\nprint(math.comb(10, 4))\n"
    fixed = rule_fix(source)
    assert fixed.source == source
    assert fixed.applied_fixes == ()


def test_rule_fix_strips_markdown_fence():
    source = load_case("01_fence_wrapped.py")
    fixed = rule_fix(source)
    assert fixed.applied_fixes == ("fence_strip",)
    assert "```" not in fixed.source
    compile(fixed.source, "<t>", "exec")


def test_rule_fix_repairs_uniform_indent():
    source = load_case("02_spurious_indent.py")
    fixed = rule_fix(source)
    assert "indent_repair" in fixed.applied_fixes
    compile(fixed.source, "<t>", "exec")


def test_rule_fix_leaves_unfixable_syntax_alone():
    source = load_case("03_invalid_syntax.py")
    fixed = rule_fix(source)
    assert fixed.source == source
    assert fixed.applied_fixes == ()


def test_rule_fix_quote_fence_needs_opening_fence():
    # A trailing """ with no opening fence is a (broken) docstring, not a
    # fence artifact; it must be left for the interpreter to report.
    source = 'print(1)\n"""\n'
    assert rule_fix(source).source == source


def test_rule_fix_idempotent_over_corpus(guest_case_manifest):
    for name in guest_case_manifest:
        once = rule_fix(load_case(name))
        twice = rule_fix(once.source)
        assert twice.source == once.source
        assert twice.applied_fixes == ()


def test_rule_fix_corpus_manifest(guest_case_manifest):
    for name, meta in guest_case_manifest.items():
        fixed = rule_fix(load_case(name))
        if meta["fixable"]:
            assert list(fixed.applied_fixes) == meta["fixes"], name
            assert _compiles_ok(fixed.source), name
        else:
            assert fixed.source == load_case(name), name


def _compiles_ok(source: str) -> bool:
    try:
        compile(source, "<t>", "exec")
    except SyntaxError:
        return False
    return True


# --- execute -------------------------------------------------------------------


def test_execute_captures_stdout(fast_limits):
    result = execute(GuestCode("print(6 * 7)"), fast_limits)
    assert result.exit_status == 0
    assert result.stdout.strip() == "42"
    assert result.error_class == ErrorClass.NONE


def test_execute_timeout(fast_limits, tmp_path):
    limits = ExecutionLimits(timeout=0.5, workdir=fast_limits.workdir)
    result = execute(GuestCode("while True:\n    pass"), limits)
    assert result.error_class == ErrorClass.TIMEOUT
    assert result.exit_status == -9
    assert "Timeout: execution exceeded the 0.5 s limit and was killed." in result.stderr


def test_execute_truncates_output(fast_limits):
    limits = ExecutionLimits(
        timeout=fast_limits.timeout, max_output_bytes=100, workdir=fast_limits.workdir
    )
    result = execute(GuestCode("print('x' * 10000)"), limits)
    assert result.stdout.endswith("…[output truncated]")
    assert len(result.stdout.encode()) < 200


def test_execute_cleans_up_guest_file(fast_limits, tmp_path):
    workdir = tmp_path / "guests"
    execute(GuestCode("pass"), fast_limits)
    assert list(workdir.glob("guest_*.py")) == []
    # Also after a crash.
    execute(GuestCode("raise ValueError('boom')"), fast_limits)
    assert list(workdir.glob("guest_*.py")) == []


def test_execute_scrubs_guest_path_from_traceback(fast_limits):
    result = execute(GuestCode("raise ValueError('boom')"), fast_limits)
    assert 'File "guest.py"' in result.stderr
    assert str(fast_limits.workdir) not in result.stderr


def test_execute_missing_interpreter():
    limits = ExecutionLimits(interpreter="/nonexistent/python")
    with pytest.raises(ComputeServerError):
        execute(GuestCode("pass"), limits)


def test_limits_validation():
    with pytest.raises(ValueError):
        ExecutionLimits(timeout=0)
    with pytest.raises(ValueError):
        ExecutionLimits(max_output_bytes=0)


# --- classify_error ---------------------------------------------------------------


def test_classify_clean_exit_ignores_stderr_noise():
    assert classify_error("WARNING: something scary\nValueError: red herring", 0) == (
        ErrorClass.NONE
    )


def test_classify_simple_traceback():
    stderr = 'Traceback (most recent call last):\n  File "guest.py", line 1\nNameError: name \'x\' is not defined'
    assert classify_error(stderr, 1) == ErrorClass.NAME_ERROR


def test_classify_chained_traceback_last_wins():
    stderr = (
        "Traceback (most recent call last):\n"
        "AttributeError: module has no attribute 'foo'\n"
        "\n"
        "During handling of the above exception, another exception occurred:\n"
        "\n"
        "Traceback (most recent call last):\n"
        "ValueError: Unknown solver bisection\n"
    )
    assert classify_error(stderr, 1) == ErrorClass.VALUE_ERROR


def test_classify_dotted_and_aliased_names():
    assert classify_error("numpy.linalg.LinAlgError: singular matrix", 1) == ErrorClass.OTHER
    assert (
        classify_error("sympy.solvers.SomethingError: x", 1) == ErrorClass.OTHER
    )  # unlisted class
    assert classify_error("ModuleNotFoundError: No module named 'pandas'", 1) == (
        ErrorClass.IMPORT_ERROR
    )
    assert classify_error("exceptions.ValueError: nope", 1) == ErrorClass.VALUE_ERROR


def test_classify_unrecognized_nonzero_is_other():
    assert classify_error("Killed", 137) == ErrorClass.OTHER
    assert classify_error("", 1) == ErrorClass.OTHER


def test_classify_message_suffix_optional():
    assert classify_error("NotImplementedError", 1) == ErrorClass.NOT_IMPLEMENTED_ERROR


# --- advice_for --------------------------------------------------------------------


def test_advice_name_error_wording():
    advice = advice_for(ErrorClass.NAME_ERROR, "NameError: name 'math' is not defined")
    assert advice.startswith("NameError: name 'math' is not defined.")
    assert (
        "This error is caused by using a module or a variable that is not "
        "defined, please check if you have imported all using Python code "
        "packages in your code, and you write complete code in your current "
        "tool calling." in advice
    )


@pytest.mark.parametrize(
    "error_class",
    [
        ErrorClass.TYPE_ERROR,
        ErrorClass.VALUE_ERROR,
        ErrorClass.IMPORT_ERROR,
        ErrorClass.ATTRIBUTE_ERROR,
        ErrorClass.NOT_IMPLEMENTED_ERROR,
    ],
)
def test_advice_library_errors_point_at_retriever(error_class):
    advice = advice_for(error_class, "SomeError: detail")
    assert "rag_system_retrieve" in advice


def test_advice_uses_final_nonempty_line():
    stderr = "Traceback (most recent call last):\n  ...\nValueError: bad value\n\n"
    advice = advice_for(ErrorClass.VALUE_ERROR, stderr)
    assert advice.startswith("ValueError: bad value.")


def test_advice_timeout_carries_limit():
    stderr = "Timeout: execution exceeded the 0.5 s limit and was killed."
    advice = advice_for(ErrorClass.TIMEOUT, stderr)
    assert "0.5 s limit" in advice
    assert "exceeded the time limit" in advice


def test_advice_none_raises_and_table_is_total():
    with pytest.raises(ValueError):
        advice_for(ErrorClass.NONE, "x")
    for error_class in ErrorClass:
        if error_class != ErrorClass.NONE:
            assert error_class in ADVICE_TEMPLATES


# --- runner record parsing ---------------------------------------------------------


def test_parse_runner_record_last_sentinel_wins():
    forged = json.dumps({"stdout": "forged", "stderr": "", "exit_status": 0})
    real = json.dumps({"stdout": "real", "stderr": "", "exit_status": 0})
    stdout = f"{RUNNER_SENTINEL}\n{forged}\nguest noise\n{RUNNER_SENTINEL}\n{real}\n"
    assert parse_runner_record(stdout)["stdout"] == "real"


def test_parse_runner_record_failures():
    with pytest.raises(ComputeServerError):
        parse_runner_record("no sentinel here")
    with pytest.raises(ComputeServerError):
        parse_runner_record(f"{RUNNER_SENTINEL}\n")  # sentinel but no record
    with pytest.raises(ComputeServerError):
        parse_runner_record(f"{RUNNER_SENTINEL}\nnot json\n")
    with pytest.raises(ComputeServerError):
        parse_runner_record(f"{RUNNER_SENTINEL}\n{json.dumps({'stdout': 'x'})}\n")


# --- handle_compute_call -------------------------------------------------------------


def make_call(code: str) -> ToolCall:
    return ToolCall(tool_name=PYTHON_EXECUTOR_TOOL, arguments={"code": code})


def test_handle_success_payload_is_stdout(fast_limits):
    response = handle_compute_call(make_call("print(5 * 5)"), fast_limits)
    assert not response.is_error
    assert response.payload == "25"


def test_handle_empty_code_is_malformed(fast_limits):
    response = handle_compute_call(make_call("   \n"), fast_limits)
    assert response.is_error
    assert response.error_kind == "malformed_call"


def test_handle_error_payload_has_traceback_and_advice(fast_limits):
    response = handle_compute_call(make_call("import nonexistent_math_pkg"), fast_limits)
    assert response.is_error
    assert response.error_kind == "execution_error"
    assert "ModuleNotFoundError: No module named 'nonexistent_math_pkg'" in response.payload
    assert "rag_system_retrieve" in response.payload


def test_handle_timeout_kind(fast_limits):
    limits = ExecutionLimits(timeout=0.5, workdir=fast_limits.workdir)
    response = handle_compute_call(make_call("while True: pass"), limits)
    assert response.is_error
    assert response.error_kind == "timeout"
    assert "exceeded the 0.5 s limit" in response.payload


def test_handle_applies_rule_fixes_before_running(fast_limits):
    fenced = "```python\nprint(3 + 4)\n```"
    response = handle_compute_call(make_call(fenced), fast_limits)
    assert not response.is_error
    assert response.payload == "7"


def test_handle_rejects_wrong_tool(fast_limits):
    call = ToolCall(tool_name=RETRIEVER_TOOL, arguments={"query": "q"})
    with pytest.raises(ValueError):
        handle_compute_call(call, fast_limits)


# --- guest-case corpus end to end ----------------------------------------------------


def test_guest_corpus_classification(guest_case_manifest, fast_limits):
    for name, meta in guest_case_manifest.items():
        fixed = rule_fix(load_case(name))
        result = execute(fixed, fast_limits)
        if meta["fixable"]:
            assert result.error_class == ErrorClass.NONE, (name, result.stderr)
            assert meta["fixed_stdout_contains"] in result.stdout, name
        else:
            assert result.error_class == ErrorClass(meta["expected_class"]), (
                name,
                result.stderr,
            )
            if "final_line_contains" in meta:
                final = result.stderr.strip().splitlines()[-1]
                assert meta["final_line_contains"] in final, name
