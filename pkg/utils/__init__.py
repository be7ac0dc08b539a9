"""Wire codec and message bus shared by every actor."""
