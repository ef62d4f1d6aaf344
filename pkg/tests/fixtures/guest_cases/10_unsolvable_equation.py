from sympy import symbols, Eq, solve, sqrt, Rational

x = symbols('x', real=True)
equation = Eq(x ** Rational(2, 3) + (-sqrt(3) * x + sqrt(3) / 2) ** Rational(2, 3), 1)
solutions = solve(equation, x)
print(solutions)
