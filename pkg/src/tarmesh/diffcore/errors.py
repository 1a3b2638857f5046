class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class NonFiniteError(FloatingPointError):
    pass


class NonDeterministicError(RuntimeError):
    pass
