// acceptance criteria; filled in as modules land
