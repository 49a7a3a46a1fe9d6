"""Objects as processes: a remote-object runtime for parallel programming."""
