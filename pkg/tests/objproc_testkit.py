"""Extra classes the tests register on every machine."""

from objproc.runtime import remote


class Sleeper:
    """Busy for a while, then records that it finished."""

    def __init__(self, node):
        self.node = node
        self.finished = 0

    @remote
    def work(self, seconds):
        self.node.sleep(seconds)
        self.finished += 1
        return self.finished

    @remote
    def finished_count(self):
        return self.finished


class Echo:
    def __init__(self, node, tag=0):
        self.tag = tag

    @remote
    def echo(self, v):
        return v

    @remote
    def pair(self, a, b=0):
        return [self.tag, a, b]


def register(node):
    node.register_class(Sleeper)
    node.register_class(Echo)
